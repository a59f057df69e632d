use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Value outside an operation's domain (e.g. log of a non-positive number).
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    /// An API contract was violated (non-scalar loss, fully masked row, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; names the offending key.
    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Environment fault.
    #[error("environment error: {0}")]
    Env(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}
