use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TfmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: {report}")]
    Divergence { step: usize, report: String },

    #[error("integration failed at step {step}: non-finite state")]
    Integration { step: usize },

    #[error("undefined cosine: {0}")]
    UndefinedCosine(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl TfmError {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        TfmError::Config { key: key.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TfmError::Io { path: path.into(), source }
    }

    /// Coarse category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            TfmError::Shape(_)
            | TfmError::Precondition(_)
            | TfmError::Index(_)
            | TfmError::Unsupported(_)
            | TfmError::Contract(_)
            | TfmError::Config { .. } => ErrorKind::Validation,
            TfmError::Divergence { .. } | TfmError::Integration { .. } | TfmError::UndefinedCosine(_) => {
                ErrorKind::Numerical
            }
            TfmError::Checkpoint { .. } | TfmError::Io { .. } | TfmError::Csv(_) => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}
