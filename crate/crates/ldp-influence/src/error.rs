//! Error type shared across the crate, with process exit codes for the CLI.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad flag value, inconsistent sweep settings).
    #[error("config: {0}")]
    Config(String),

    /// Problem with input data (file contents, index sets, category values).
    #[error("data: {0}")]
    Data(String),

    /// CSV row that could not be parsed. Rows are 1-based and count the
    /// header row, matching what an editor shows.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    /// Value not covered by the declared schema.
    #[error("schema: {0}")]
    Schema(String),

    /// Vector or matrix dimensions that do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// Numerical failure: factorization breakdown, divergence, non-convergence.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 data error,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Schema(_) | Error::Io(_) => 3,
            Error::Dimension { .. } | Error::Numerical(_) => 4,
        }
    }
}
