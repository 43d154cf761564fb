//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by model construction, fitting and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller handed us something malformed: bad knots, unsorted quantile
    /// levels, covariates outside the unit interval, mismatched lengths.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical operation failed in a way that cannot be recovered from
    /// (singular change-of-basis system, ambiguous eigenvalue split, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
