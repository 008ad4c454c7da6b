//! Reverse-mode differentiable arrays, the Adam optimizer and the `MXCM`
//! checkpoint container.
//!
//! Computation is define-by-run: build a fresh [`Tape`] per forward pass,
//! register parameters with [`Tape::leaf`], compose primitives, then call
//! [`Tape::backward`] once on a scalar.

mod adam;
mod checkpoint;
mod gemm;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("optimizer tracks {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
}
