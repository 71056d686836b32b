//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RfError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("singular homography (|det| = {0:.3e})")]
    SingularHomography(f64),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate image pair: {0}")]
    DegeneratePair(String),

    #[error("descriptor error: {0}")]
    Descriptor(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl RfError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        RfError::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        RfError::Parse { path: path.into(), message: message.into() }
    }
}
