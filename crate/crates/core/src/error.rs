use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("trajectory is malformed and cannot be serialized")]
    Malformed,

    #[error("invalid corpus parameters: {0}")]
    Corpus(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("group too small: need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("hindsight construction failed: {0}")]
    Hindsight(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
