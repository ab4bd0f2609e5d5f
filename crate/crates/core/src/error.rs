//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("unknown world preset `{preset}` (known presets: {known})")]
    UnknownPreset { preset: String, known: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular linear system in {context}: {hint}")]
    Singular { context: String, hint: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
