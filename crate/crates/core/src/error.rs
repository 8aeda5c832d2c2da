//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum.
///
/// The CLI maps `Config` to exit code 2 and everything else that reaches
/// `main` to exit code 3, so constructors should pick the variant that
/// reflects *whose* input was bad: `Config` for run-configuration problems,
/// `Data` for datasets/archives/prompts, `Shape` for tensor-level
/// incompatibilities discovered while computing.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration (bad field value, inconsistent dims, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data: datasets, archives, masks, prompts.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch; the message names the offending tensor.
    #[error("shape error: {0}")]
    Shape(String),

    /// Underlying I/O failure.
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
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
