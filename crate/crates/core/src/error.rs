use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy shared by every module.
///
/// `Config` and `Argument` are user errors; the rest are runtime failures
/// carrying enough context (path, stage, step) to locate the fault.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("numeric error in {stage}: {msg}")]
    Numeric { stage: String, msg: String },

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("archive error at {path}: {msg}")]
    Archive { path: PathBuf, msg: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            msg: msg.into(),
        }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// True for errors caused by bad user input rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_))
    }
}
