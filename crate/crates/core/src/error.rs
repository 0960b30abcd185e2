use std::path::PathBuf;

/// Errors produced anywhere in the retrieve-and-fit pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("geometry has zero surface area")]
    ZeroArea,

    #[error("unknown source id {0}")]
    UnknownSource(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("database has {available} sources but {requested} candidates were requested")]
    DatabaseTooSmall { requested: usize, available: usize },

    #[error("database is empty")]
    EmptyDatabase,

    #[error("{path}: parse error at `{location}`: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: unsupported schema version `{found}` (expected `{expected}`)")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("backward called with a cache from an older parameter state")]
    StaleCache,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
