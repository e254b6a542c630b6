//! Crate-wide error type.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can map
//! them onto distinct exit codes: configuration, data, and numerical failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad parameter values, schema violations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or inconsistent data: out-of-vocabulary ids, empty inputs,
    /// kind mismatches between representations and samplers.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values encountered during computation.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
