//! Dense f64 tensors with reverse-mode automatic differentiation, plus the
//! scalar utilities (temperature softmax, KL divergence, cosine weight) shared
//! by every other module.

mod ops;
mod rng;
mod tape;
mod tensor;

pub use ops::{cosine_weight, kl_divergence, softmax_tau, softmax_tau_slice};
pub use rng::{streams, Rng};
pub use tape::{GradTape, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction, shape checks, and tape usage.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeExpected {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("tape usage error: {0}")]
    TapeUsage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
