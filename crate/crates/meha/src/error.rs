//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the solver library and the CLI plumbing.
#[derive(Debug, Error)]
pub enum MehaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A computation produced NaN or infinity. The context names the
    /// operation and, when raised inside a run, the iteration index.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing constants: {0}")]
    MissingConstants(String),

    #[error("matrix is singular or not positive definite: {0}")]
    SingularMatrix(String),

    #[error("{path}: row {row}: {message}")]
    CsvParse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MehaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MehaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MehaError>;
