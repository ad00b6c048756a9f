//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A reverse sweep hit a NaN adjoint; `node` is the tape index it
    /// surfaced at.
    #[error("numeric failure during backward sweep at tape node {node}: {what}")]
    Numeric { node: usize, what: &'static str },

    /// A forward quantity (state, utility argument, network output, gradient)
    /// left the representable range.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The operation was called in a way the API does not support.
    #[error("unsupported usage: {0}")]
    Usage(String),

    /// Configuration failed validation; the message names the field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A checkpoint could not be read, parsed, or was version-incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
