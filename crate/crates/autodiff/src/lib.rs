//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The [`Graph`] records every primitive op applied during a forward pass;
//! [`Graph::backward`] replays the record in reverse and accumulates gradients
//! into the [`Param`]s that fed the pass. Everything is 64-bit and
//! single-threaded per graph; independent graphs may run in parallel.

mod checkpoint;
mod graph;
mod ops;
mod param;
mod tensor;
pub mod testing;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Graph, NodeId};
pub use param::{Param, ParamSet};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, AdError>;
