use std::collections::HashSet;

use super::{build_discourse_graph, DiscourseRelation, GraphError};
use crate::corpus::{AnnotationBundle, Conversation};

/// Per-conversation averages over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub conversation_count: usize,
    pub mean_participants: f64,
    pub mean_turns: f64,
    /// Deduplicated annotated edges; self-loops excluded.
    pub mean_discourse_edges: f64,
    pub mean_action_triples: f64,
}

pub fn corpus_stats(corpus: &[(Conversation, AnnotationBundle)]) -> Result<CorpusStats, GraphError> {
    if corpus.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    let mut participants = 0usize;
    let mut turns = 0usize;
    let mut edges = 0usize;
    let mut triples = 0usize;
    for (conv, bundle) in corpus {
        participants += conv
            .utterances
            .iter()
            .map(|u| u.speaker.as_str())
            .collect::<HashSet<_>>()
            .len();
        turns += conv.utterances.len();
        edges += build_discourse_graph(conv, &bundle.discourse_edges)?.annotated_edge_count();
        triples += bundle.action_triples.len();
    }
    let n = corpus.len() as f64;
    Ok(CorpusStats {
        conversation_count: corpus.len(),
        mean_participants: participants as f64 / n,
        mean_turns: turns as f64 / n,
        mean_discourse_edges: edges as f64 / n,
        mean_action_triples: triples as f64 / n,
    })
}

/// Count and share of each annotated relation type over deduplicated edges,
/// in relation order.
pub fn relation_distribution(
    corpus: &[(Conversation, AnnotationBundle)],
) -> Result<Vec<(DiscourseRelation, usize, f64)>, GraphError> {
    let mut counts = [0usize; 16];
    for (conv, bundle) in corpus {
        for e in build_discourse_graph(conv, &bundle.discourse_edges)?.annotated_edges() {
            counts[e.relation.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(DiscourseRelation::ANNOTATED
        .iter()
        .zip(counts)
        .map(|(&r, c)| {
            let share = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            (r, c, share)
        })
        .collect())
}
