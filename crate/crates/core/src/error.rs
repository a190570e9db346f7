use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum FicgenError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layout invalid at box {index}: {reason}")]
    LayoutInvalid { index: usize, reason: String },

    #[error("unknown class: {0}")]
    UnknownClass(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("model state not usable: {0}")]
    BadModelState(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for FicgenError {
    fn from(e: serde_json::Error) -> Self {
        FicgenError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FicgenError>;
