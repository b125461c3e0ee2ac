//! Minimal reverse-mode differentiable tensor engine.
//!
//! Tensors live in a [`Graph`] arena and are addressed by [`TensorId`].
//! Every operation records enough context for a reverse topological sweep;
//! [`Graph::backward`] populates gradients on all `requires_grad` tensors,
//! accumulating additively across fan-out. The engine is generic over the
//! element type: `f32` for training, `f64` so gradient checks are run at a
//! precision where central differences are meaningful.

pub mod alloc;
mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use graph::{CustomGrad, Graph, TensorId};
pub use ops::norm::RunningStats;

use thiserror::Error;

/// Element type of engine tensors.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
    + num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Forward/eval switch for layers whose behaviour differs (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum AutonnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: output extent ({extent} + 2*{padding} - {kernel}) not divisible by stride {stride}")]
    NonIntegralOutput {
        op: &'static str,
        extent: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: pooling window {window} exceeds spatial extent {extent}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        extent: usize,
    },
    #[error("batchnorm: train-mode statistics over {count} element(s); need at least 2")]
    DegenerateBatch { count: usize },
    #[error("backward: loss tensor has {numel} elements; expected a scalar")]
    NotScalarLoss { numel: usize },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutonnError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
