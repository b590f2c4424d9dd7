use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// A malformed line in a line-oriented input file.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A structurally invalid file or record (header mismatch, bad magic, schema violation).
    #[error("format error: {0}")]
    Format(String),

    /// Arguments that violate an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training produced non-finite values or otherwise diverged.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
