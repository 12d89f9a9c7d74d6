//! Dense tensors, a reverse-mode differentiation tape, and an Adam optimizer.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;
#[cfg(test)]
mod tests;

pub use checkpoint::{ParamCheckpoint, ParamRecord, PARAMS_FORMAT, PARAMS_VERSION};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have differing lengths")]
    Ragged,
    #[error("axis {axis} out of range for rank {rank} in {op}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("index {index} out of range (bound {bound}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient or value in parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
