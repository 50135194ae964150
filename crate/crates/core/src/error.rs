use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KagsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KagsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint config mismatch on key `{key}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KagsError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        KagsError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KagsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by user input (exit code 1) versus internal failures (exit code 2).
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            KagsError::Precondition(_)
                | KagsError::Config(_)
                | KagsError::ConfigMismatch { .. }
                | KagsError::Parse { .. }
                | KagsError::Validation(_)
                | KagsError::Format { .. }
                | KagsError::Join(_)
                | KagsError::Io { .. }
                | KagsError::Json(_)
        )
    }
}
