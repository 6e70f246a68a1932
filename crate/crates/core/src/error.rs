use thiserror::Error;

/// Errors produced by stream generation, buffering, training and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("insufficient data: requested {requested}, available {available}")]
    InsufficientData { requested: usize, available: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
