//! Structure-aware abstractive conversation summarization.
//!
//! A conversation is encoded by a transformer over its flattened tokens and
//! by two relation-aware graph attention encoders: one over a discourse graph
//! of typed links between utterances, one over an action graph of
//! who-doing-what triples. A transformer decoder cross-attends to tokens and
//! to both node sets and fuses the graph views through ReZero-gated
//! residuals. Everything runs on the reverse-mode autodiff engine in
//! [`tensor`].

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod nn;
pub mod rouge;
pub mod tensor;
pub mod training;

pub use config::{Config, DecoderConfig, EncoderConfig, FusionStrategy, TrainConfig};
pub use corpus::{
    ActionTriple, AnnotationBundle, Conversation, CorefCluster, CorefMention, DiscourseAnnotation, Utterance,
    Vocabulary,
};
pub use error::{Error, Result};
pub use graph::{ActionGraph, CorpusStats, DiscourseGraph, DiscourseRelation};
pub use model::{prepare_corpus, prepare_example, Example, Model, TripleSourceMode};
pub use rouge::{RougeScore, RougeTriple};
pub use tensor::{Tensor, TensorError};
pub use training::{SummaryHypothesis, TrainReport};
