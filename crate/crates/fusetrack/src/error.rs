use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI's exit-code categories:
/// `Format` for malformed inputs, `Config` for inconsistent configuration,
/// `Numerics` for numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (bad header, wrong arity, unparsable value).
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    /// Inconsistent configuration (missing noise entry, dim mismatch, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure (non-SPD matrix, singular innovation covariance).
    #[error("numerical failure: {0}")]
    Numerics(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
