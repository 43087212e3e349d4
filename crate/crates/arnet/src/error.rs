//! Crate-wide error type.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure.
    Io(io::Error),
    /// Malformed on-disk data: bad magic, truncation, unparseable CSV.
    Format(String),
    /// Violated precondition or invariant on in-memory data.
    Invalid(String),
    /// Dimension disagreement between arrays or between files.
    Shape(String),
    /// NaN or infinity where a finite value is required.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "I/O error: {e}"),
            Self::Format(s) => write!(f, "format error: {s}"),
            Self::Invalid(s) => write!(f, "invalid: {s}"),
            Self::Shape(s) => write!(f, "shape error: {s}"),
            Self::NonFinite(s) => write!(f, "non-finite value: {s}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
