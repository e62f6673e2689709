//! Minimal numerical substrate: dense tensors, a reverse-mode tape over the
//! primitives the rest of the crate composes, and the AdamW/cosine-schedule
//! optimizer pair.
//!
//! Everything here is generic over [`Scalar`] (`f32` or `f64`). Training code
//! uses `f32`; the finite-difference oracle in [`gradcheck`] instantiates the
//! same ops in `f64`.

mod graph;
pub mod gradcheck;
mod optim;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{adamw_step, cosine_lr, global_grad_norm, AdamWConfig, LrSchedule, OptimizerState};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

/// Structured errors from tensor/graph construction and optimization.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?} ({what})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        what: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: expected scalar output, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("cross_entropy: no masked positions")]
    NoMaskedPositions,
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{what}")]
    Invalid { what: String },
}
