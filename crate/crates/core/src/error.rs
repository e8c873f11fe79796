use std::io;

use crate::kv::SeqId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("out of KV tiles")]
    OutOfTiles,

    #[error("sequence {0} is already registered")]
    DuplicateSequence(SeqId),

    #[error("unknown sequence {0}")]
    UnknownSequence(SeqId),

    #[error("position {position} out of range (token count {token_count})")]
    PositionOutOfRange { position: usize, token_count: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("prompt too long: {len} tokens, limit {limit}")]
    PromptTooLong { len: usize, limit: usize },

    #[error("request does not fit the KV pool: needs {needed} tiles, pool has {total}")]
    ExceedsPoolCapacity { needed: usize, total: usize },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("corrupt model file: {0}")]
    CorruptFile(String),

    #[error("infeasible worker plan: {0}")]
    InfeasiblePlan(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("malformed trace at line {line}: {message}")]
    MalformedTrace { line: usize, message: String },

    #[error("unknown kernel backend {0:?} (expected \"naive\" or \"blocked\")")]
    UnknownBackend(String),

    #[error("queue full ({0} outstanding requests)")]
    QueueFull(usize),

    #[error("worker unavailable")]
    WorkerUnavailable,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
