//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MasnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter path: {0}")]
    UnknownParam(String),

    #[error("duplicate parameter path: {0}")]
    DuplicateParam(String),

    #[error("loss is not deterministic: two identical evaluations returned {0} and {1}")]
    NonDeterministicLoss(f64, f64),

    #[error("unknown model variant: {0}")]
    UnknownVariant(String),

    #[error("task mismatch: checkpoint/config expects {expected}, dataset holds {found}")]
    TaskMismatch { expected: String, found: String },

    #[error("shape drift between checkpoint and episode data: {0}")]
    ShapeDrift(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error(transparent)]
    Format(#[from] crate::data::format::FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MasnError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MasnError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, MasnError>;
