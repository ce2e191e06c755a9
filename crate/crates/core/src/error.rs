use thiserror::Error;

use crate::tensor::TensorId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape {0:?}: rank must be >= 1 and every dim > 0")]
    InvalidShape(Vec<usize>),
    #[error("data length {got} does not match shape numel {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tensor {0} is not live in this engine")]
    UnknownTensor(TensorId),
    #[error("tensor {0} was already released")]
    DoubleRelease(TensorId),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("duplicate op `{0}` in registry")]
    DuplicateOp(String),
    #[error("op `{op}` expects {expected} operands, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("op `{op}`: {msg}")]
    Operand { op: &'static str, msg: String },
    #[error("op `{0}` is not forward-differentiable here")]
    NotFad(&'static str),
    #[error("op `{op}`: missing saved tensor for slot {slot}")]
    MissingSaved { op: &'static str, slot: usize },
    #[error("fad inputs of `{0}` come from different sources")]
    MixedSources(&'static str),
    #[error("fad tensor {0} has no source link")]
    MissingSource(TensorId),
    #[error("tensor {0} was not produced by this tape")]
    NotOnTape(TensorId),
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("graph: {0}")]
    Graph(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("candidate is stale: {0}")]
    StaleCandidate(String),
    #[error("missing feed for input `{0}`")]
    MissingFeed(String),
    #[error("config: {0}")]
    Config(String),
}
