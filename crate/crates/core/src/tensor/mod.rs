//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`]. A forward pass records operations on a
//! [`Tape`], which hands out [`Var`] handles; [`Tape::backward`] walks the tape
//! in reverse creation order. Trainable weights are kept outside the tape in a
//! [`ParamStore`] so that a finished parameter snapshot is plain data that can
//! be shared across threads, while each tape stays confined to the thread that
//! built it.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod shape;
mod tape;
mod value;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_on, grad_check_params, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use shape::broadcast_shapes;
pub use tape::{Tape, Var};
pub use value::{Mask, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("softmax slice {slice} is fully masked")]
    FullyMasked { slice: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
