//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its accepted range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Inconsistent configuration (dims, heads, grid).
    #[error("config error: {0}")]
    Config(String),

    /// Input values outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Class name not present in the configured vocabulary.
    #[error("unknown affordance class `{0}`")]
    Vocabulary(String),

    /// Caller broke a documented precondition (e.g. unnormalized distribution).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error: 2 for anything I/O or parse related,
    /// 1 for contract violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::Format { .. } => 2,
            _ => 1,
        }
    }
}
