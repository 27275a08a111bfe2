//! Reverse-mode differentiation substrate: tensors, the tape, parameters,
//! layers and the optimizer.

mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{adam_step, grad_norm, lr_schedule, OptimState};
pub use params::ParamStore;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} out of bounds for length {len}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("loss must be scalar, got [{rows}, {cols}]")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}
