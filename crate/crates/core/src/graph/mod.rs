//! Discourse and action graph construction, point-of-view rewriting, corpus
//! statistics and graph randomization.

mod action;
mod discourse;
mod pov;
mod relation;
mod stats;
mod svo;

use serde_json::json;
use thiserror::Error;

pub use action::{build_action_graph, ActionGraph, ActionNode, ActionRole};
pub use discourse::{build_discourse_graph, random_graph, DiscourseEdge, DiscourseGraph};
pub use pov::{addressee, transform_pov};
pub use relation::{DiscourseRelation, UnknownRelation};
pub use stats::{corpus_stats, relation_distribution, CorpusStats};
pub use svo::{is_verb, naive_svo_extract};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge {src}->{dst} out of range for {nodes} nodes")]
    OutOfRange { src: usize, dst: usize, nodes: usize },
    #[error("SelfLoop is reserved and cannot be annotated")]
    ReservedRelation,
    #[error("triple {triple}: empty `{field}`")]
    EmptyField { triple: usize, field: &'static str },
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Directed message-passing edges: node `targets[e]` attends to node
/// `sources[e]` under relation id `relations[e]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeList {
    pub node_count: usize,
    pub relation_count: usize,
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub relations: Vec<usize>,
}

impl EdgeList {
    pub fn new(node_count: usize, relation_count: usize) -> Self {
        Self {
            node_count,
            relation_count,
            targets: Vec::new(),
            sources: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn push(&mut self, target: usize, source: usize, relation: usize) {
        self.targets.push(target);
        self.sources.push(source);
        self.relations.push(relation);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Node with no incoming edge, if any.
    pub fn isolated_node(&self) -> Option<usize> {
        let mut has = vec![false; self.node_count];
        for &t in &self.targets {
            has[t] = true;
        }
        has.iter().position(|h| !h)
    }
}

/// Line record for `build-graphs` output.
pub fn discourse_dump(id: &str, graph: &DiscourseGraph) -> serde_json::Value {
    json!({
        "id": id,
        "kind": "discourse",
        "nodes": (0..graph.node_count).collect::<Vec<_>>(),
        "edges": graph.edges.iter().map(|e| json!([e.src, e.dst, e.relation.name()])).collect::<Vec<_>>(),
    })
}

pub fn action_dump(id: &str, graph: &ActionGraph) -> serde_json::Value {
    json!({
        "id": id,
        "kind": "action",
        "nodes": graph.nodes.iter().map(|n| json!({
            "surface": n.surface,
            "roles": n.roles.iter().map(|r| r.name()).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "edges": graph.edges.iter().map(|(a, b)| json!([a, b, "Adjacent"])).collect::<Vec<_>>(),
    })
}
