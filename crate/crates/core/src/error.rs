use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("degenerate input: zero-norm row {row} in {operand}")]
    Degenerate { operand: &'static str, row: usize },
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input at byte offset {offset}: {source}")]
    Truncated {
        offset: u64,
        #[source]
        source: io::Error,
    },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by reading or writing files (including files
    /// whose contents are not in the expected format).
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Truncated { .. } | Error::Format(_)
        )
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }
}
