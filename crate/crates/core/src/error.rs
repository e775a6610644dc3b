use std::path::{Path, PathBuf};

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit codes: `Parameter` → 2 (usage),
/// `Data`/`Io` → 3, `Numeric` → 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A numeric failure (non-finite value, degenerate geometry, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed or inconsistent data in a file or stream.
    #[error("data error: {0}")]
    Data(String),

    /// An I/O failure, annotated with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
