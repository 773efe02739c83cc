use thiserror::Error;

/// Errors surfaced by fallible library operations. Programmer errors
/// (shape mismatches in tensor ops) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("loss has no unmasked positions")]
    EmptyLoss,

    #[error("dataset contains a single class: {0}")]
    SingleClass(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("artifact inconsistency: {0}")]
    ArtifactMismatch(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
