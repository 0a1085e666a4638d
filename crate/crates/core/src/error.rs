use thiserror::Error;

/// Errors raised by the numeric substrate and the model built on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid tensor shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("cross entropy has no active (non-ignored) positions")]
    NoActiveTargets,
    #[error("{what} index {index} out of bounds (limit {bound})")]
    Index { what: &'static str, index: usize, bound: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("sequence length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
