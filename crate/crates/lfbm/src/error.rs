//! Error taxonomy shared across the crate.
//!
//! The CLI maps these onto process exit codes: config errors exit 2,
//! data errors 3, numeric failures 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (bad shape, missing
    /// gradient, invalid argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or Inf appeared in a completed computation. Silent
    /// propagation is forbidden; the run aborts here.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed or inconsistent external data (IDX files, checkpoints,
    /// datasets).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration (unknown keys, out-of-range values,
    /// mode-inconsistent fields).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
