//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LainError>;

#[derive(Debug, Error)]
pub enum LainError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate mask: no unmasked position")]
    DegenerateMask,

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("optimizer error: parameter '{0}' has no gradient")]
    MissingGradient(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LainError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LainError::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        LainError::Domain { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LainError::Io { path: path.into(), source }
    }
}
