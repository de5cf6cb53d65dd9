use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum AceError {
    /// Invalid hyperparameters, schema, or network shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A gradient or loss became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training could not continue.
    #[error("training aborted: {0}")]
    Training(String),

    /// A data file could not be interpreted.
    #[error("data error at row {row}, column {column}: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    /// A checkpoint or report file is malformed or unsupported.
    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AceError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AceError::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        AceError::Usage(msg.into())
    }

    /// Process exit status for this error: 2 for bad input, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AceError::NonFinite(_) | AceError::Training(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AceError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AceError>;
