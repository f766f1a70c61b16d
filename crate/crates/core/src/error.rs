use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numeric domain error at {location}: {detail}")]
    NumericDomain { location: String, detail: String },

    #[error("parse error at row {row}, column `{column}`: {detail}")]
    Parse { row: usize, column: String, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step} (|w| = {w_norm:e}): {detail}")]
    Diverged { step: usize, w_norm: f64, detail: String },

    #[error("incomplete trajectory: {0}")]
    IncompleteTrajectory(String),

    #[error("trivial bound: {0}")]
    TrivialBound(String),

    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
