//! Error type shared by every module in the crate.
//!
//! Errors carry enough context to be actionable from the command line: shape
//! mismatches name the offending dimensions, file-format errors carry a byte
//! offset, and configuration errors name the parameter that was rejected.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes (or dimensions derived from them) do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric precondition failed (zero norm, NaN gradient, empty mask, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data is structurally invalid (missing files, duplicate ids, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A binary or text file does not match its expected format.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor for [`Error::Io`] with path context.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for [`Error::Format`].
    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
