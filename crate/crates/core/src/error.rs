use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file or buffer did not match its declared format. `offset` is a byte
    /// offset for binary formats and a 1-based line number for text formats.
    #[error("malformed input at {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    /// Non-finite values, divergence or an ill-conditioned matrix.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bound not found: {0}")]
    BoundNotFound(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::Param(message.into())
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical(message.into())
    }
}

impl Error {
    /// Process exit status for command-line front ends: 1 for configuration
    /// problems, 2 for unreadable or invalid data, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Param(_) => 2,
            Error::Numerical(_) | Error::BoundNotFound(_) => 3,
        }
    }
}
