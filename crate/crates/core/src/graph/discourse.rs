use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiscourseRelation, EdgeList, GraphError};
use crate::corpus::{Conversation, DiscourseAnnotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiscourseEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: DiscourseRelation,
}

/// One node per utterance; annotated edges first (deduplicated, in input
/// order), then one self-loop per node in node order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscourseGraph {
    pub node_count: usize,
    pub edges: Vec<DiscourseEdge>,
}

impl DiscourseGraph {
    fn from_annotated(node_count: usize, annotated: Vec<DiscourseEdge>) -> Self {
        let mut edges = annotated;
        edges.extend((0..node_count).map(|i| DiscourseEdge {
            src: i,
            dst: i,
            relation: DiscourseRelation::SelfLoop,
        }));
        Self { node_count, edges }
    }

    pub fn annotated_edges(&self) -> impl Iterator<Item = &DiscourseEdge> {
        self.edges.iter().filter(|e| e.relation != DiscourseRelation::SelfLoop)
    }

    pub fn annotated_edge_count(&self) -> usize {
        self.annotated_edges().count()
    }

    /// Message-passing view. An annotated link `i -> j` lets node `i` attend
    /// to node `j`. With `reverse`, `j` also attends to `i` under relation id
    /// `17 + rel`, giving 33 relation ids instead of 17.
    pub fn edge_list(&self, reverse: bool) -> EdgeList {
        let mut list = EdgeList::new(
            self.node_count,
            if reverse {
                2 * DiscourseRelation::COUNT - 1
            } else {
                DiscourseRelation::COUNT
            },
        );
        for e in &self.edges {
            list.push(e.src, e.dst, e.relation.index());
        }
        if reverse {
            for e in self.annotated_edges() {
                list.push(e.dst, e.src, DiscourseRelation::COUNT + e.relation.index());
            }
        }
        list
    }
}

pub fn build_discourse_graph(conv: &Conversation, edges: &[DiscourseAnnotation]) -> Result<DiscourseGraph, GraphError> {
    let n = conv.utterances.len();
    let mut seen = HashSet::new();
    let mut annotated = Vec::with_capacity(edges.len());
    for e in edges {
        if e.src >= n || e.dst >= n {
            return Err(GraphError::OutOfRange {
                src: e.src,
                dst: e.dst,
                nodes: n,
            });
        }
        if e.relation == DiscourseRelation::SelfLoop {
            return Err(GraphError::ReservedRelation);
        }
        let edge = DiscourseEdge {
            src: e.src,
            dst: e.dst,
            relation: e.relation,
        };
        if seen.insert(edge) {
            annotated.push(edge);
        }
    }
    Ok(DiscourseGraph::from_annotated(n, annotated))
}

/// Replaces every annotated edge by a uniformly drawn `(src, dst, relation)`
/// over all node pairs and the sixteen relations, without duplicates. The
/// annotated edge count is preserved.
pub fn random_graph(graph: &DiscourseGraph, seed: u64) -> DiscourseGraph {
    let k = graph.annotated_edge_count();
    if k == 0 {
        return graph.clone();
    }
    let n = graph.node_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(k);
    let mut annotated = Vec::with_capacity(k);
    while annotated.len() < k {
        let edge = DiscourseEdge {
            src: rng.random_range(0..n),
            dst: rng.random_range(0..n),
            relation: DiscourseRelation::ANNOTATED[rng.random_range(0..16)],
        };
        if seen.insert(edge) {
            annotated.push(edge);
        }
    }
    DiscourseGraph::from_annotated(n, annotated)
}
