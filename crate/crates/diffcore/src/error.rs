use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: input outside the finite domain of the operation")]
    NonFinite { op: &'static str },

    #[error("backward: root must hold a single scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("finite-difference check: function is not deterministic across probe evaluations")]
    NonDeterministic,

    #[error("tensor table: {reason} at byte {offset}")]
    Format { offset: usize, reason: String },

    #[error("parameter store: {0}")]
    Params(String),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
