use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Contract errors signal a violated precondition of a published
/// operation; configuration errors are raised before any training starts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} cannot combine shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate vector: norm {norm:e} is not above {epsilon:e}")]
    DegenerateVector { norm: f64, epsilon: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing key {key:?}; known keys: {known:?}")]
    MissingKey { key: String, known: Vec<String> },

    #[error("{path}:{line}: {message}")]
    Annotation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
