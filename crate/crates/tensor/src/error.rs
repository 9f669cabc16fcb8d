use thiserror::Error;

/// Errors raised by tensor construction, tape operations and gradient checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward through {op} produced a non-finite gradient")]
    NonFiniteGradient { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,

    #[error("variable {index} does not belong to this tape (len {len})")]
    UnknownVar { index: usize, len: usize },

    #[error("function under gradient check is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}
