//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// A computation left the representable range or a factorization failed.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The optimizer could not produce a usable fit.
    #[error("estimation error: {0}")]
    Estimation(String),
    /// A replicated experiment could not be completed.
    #[error("experiment error: {0}")]
    Experiment(String),
}

pub type Result<T> = std::result::Result<T, Error>;
