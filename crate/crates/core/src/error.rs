use std::path::PathBuf;

use amda_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AmdaError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("access violation: {0}")]
    AccessViolation(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AmdaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmdaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AmdaError>;
