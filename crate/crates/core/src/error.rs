//! Error type shared by all modules of the crate.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by tensor operations, layers, data handling and training.
#[derive(Debug)]
pub enum Error {
    /// A shape or dimension contract was violated (mismatched extents,
    /// wrong rank, zero extent, odd pooling extent, ...).
    Dimension(String),
    /// A scalar parameter is outside its documented range.
    Parameter(String),
    /// Underlying I/O failure, annotated with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// A file's bytes do not form a valid image or checkpoint; `offset`
    /// points at the first offending byte.
    Format { path: PathBuf, offset: usize, message: String },
    /// A dataset violates the protocol (empty class, non-divisible split,
    /// wrong image size, ...).
    Dataset(String),
    /// An API was driven in an unsupported order (e.g. a backward pass with
    /// a cache from a different forward).
    Usage(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Format { path, offset, message } => {
                write!(f, "format error in {} at byte {offset}: {message}", path.display())
            }
            Error::Dataset(msg) => write!(f, "dataset error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
