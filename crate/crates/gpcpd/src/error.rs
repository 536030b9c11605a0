// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A positive-definite factorization failed even after the jitter retry.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// A computation left the finite floating-point range.
    #[error("numerical issue: {0}")]
    Numerical(String),

    /// The multiplicity correction collapsed to a corrected level of zero,
    /// typically because too few replicates back too many cells.
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    /// CSV parse or shape error, with row/column location where known.
    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn factorization(msg: impl Into<String>) -> Self {
        Error::Factorization(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn csv(msg: impl Into<String>) -> Self {
        Error::Csv(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
