use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Zero-norm vector where a direction is required.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {0} has no examples")]
    MissingClass(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {path} at byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// The innermost error, looking through task wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Task { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
