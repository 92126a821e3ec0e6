use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An invalid configuration value, reported with the offending key.
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    /// Bad input data (labels out of range, non-finite values, malformed files).
    #[error("invalid input: {0}")]
    Input(String),

    /// An API used out of order (backward on a non-scalar, step without gradients).
    #[error("usage error: {0}")]
    Usage(String),

    /// Parameter lists that cannot be exchanged or averaged together.
    #[error("incompatible parameters at {location}: {message}")]
    Compatibility { location: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from the user's configuration rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
