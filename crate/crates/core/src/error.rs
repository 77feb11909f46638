use qcmhm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: interval begins at {begin} after it ends at {end}")]
    ReversedInterval {
        line: usize,
        begin: String,
        end: String,
    },
    #[error("the fact set is empty")]
    EmptyStore,
    #[error("unknown {kind} id {id} (vocabulary size {size})")]
    UnknownId {
        kind: &'static str,
        id: usize,
        size: usize,
    },
    #[error("question is unanswerable: {0}")]
    Unanswerable(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at {0}")]
    NonFinite(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("operation unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
