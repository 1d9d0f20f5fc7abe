use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument values or mismatched shapes.
    #[error("invalid input: {0}")]
    Input(String),
    /// Invalid configuration (sizes, hyper-parameters, network layout).
    #[error("configuration error: {0}")]
    Config(String),
    /// API misuse, e.g. a backward pass without a cached forward pass.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed file contents.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    /// Non-finite values produced during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
