use std::collections::{HashMap, HashSet};

use super::{EdgeList, GraphError};
use crate::corpus::ActionTriple;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionRole {
    Who,
    Doing,
    What,
}

impl ActionRole {
    pub fn name(self) -> &'static str {
        match self {
            Self::Who => "who",
            Self::Doing => "doing",
            Self::What => "what",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionNode {
    pub surface: String,
    /// Roles the surface has played across triples, in `Who, Doing, What` order.
    pub roles: Vec<ActionRole>,
}

/// Undirected graph over deduplicated triple arguments. Each edge is stored
/// once as `(lo, hi)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActionGraph {
    pub nodes: Vec<ActionNode>,
    pub edges: Vec<(usize, usize)>,
}

impl ActionGraph {
    pub const ADJACENT: usize = 0;
    pub const SELF_LOOP: usize = 1;

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Both directions of every edge plus a self-loop per node.
    pub fn edge_list(&self) -> EdgeList {
        let mut list = EdgeList::new(self.nodes.len(), 2);
        for &(a, b) in &self.edges {
            list.push(a, b, Self::ADJACENT);
            list.push(b, a, Self::ADJACENT);
        }
        for i in 0..self.nodes.len() {
            list.push(i, i, Self::SELF_LOOP);
        }
        list
    }
}

pub fn build_action_graph(triples: &[ActionTriple]) -> Result<ActionGraph, GraphError> {
    let mut graph = ActionGraph::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();

    let mut node = |graph: &mut ActionGraph, surface: &str, role: ActionRole| -> usize {
        let id = *index.entry(surface.to_string()).or_insert_with(|| {
            graph.nodes.push(ActionNode {
                surface: surface.to_string(),
                roles: Vec::new(),
            });
            graph.nodes.len() - 1
        });
        let roles = &mut graph.nodes[id].roles;
        if !roles.contains(&role) {
            roles.push(role);
            roles.sort();
        }
        id
    };

    for (t, triple) in triples.iter().enumerate() {
        let who = triple.who.trim();
        let doing = triple.doing.trim();
        let what = triple.what.trim();
        if who.is_empty() {
            return Err(GraphError::EmptyField {
                triple: t,
                field: "who",
            });
        }
        if doing.is_empty() {
            return Err(GraphError::EmptyField {
                triple: t,
                field: "doing",
            });
        }
        let w = node(&mut graph, who, ActionRole::Who);
        let d = node(&mut graph, doing, ActionRole::Doing);
        let mut pairs = vec![(w, d)];
        if !what.is_empty() {
            let o = node(&mut graph, what, ActionRole::What);
            pairs.push((d, o));
        }
        for (a, b) in pairs {
            // A surface repeated inside one triple collapses to one node; its
            // self-loop comes from encoding, not from here.
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                graph.edges.push(key);
            }
        }
    }
    Ok(graph)
}
