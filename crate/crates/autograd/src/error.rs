use thiserror::Error;

use crate::OpKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: OpKind, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: invalid input: {reason}")]
    InvalidInput { op: OpKind, reason: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("{op}: expected {expected} input tensor(s), got {got}")]
    Arity { op: OpKind, expected: usize, got: usize },

    #[error("{op}: attributes do not match this op")]
    BadAttrs { op: OpKind },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward graph has already been consumed")]
    GraphFreed,

    #[error("tensor data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("parameter `{name}`: expected {expected} values, got {got}")]
    ParamLength { name: String, expected: usize, got: usize },

    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("step size must be positive, got {0}")]
    BadEpsilon(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;
