use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "capacity error: sequence needs {needed} positions but only {available} are available"
    )]
    Capacity { needed: usize, available: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("empty batch: all {skipped} items were skipped")]
    EmptyBatch { skipped: usize },

    #[error("type tokens already registered")]
    AlreadyRegistered,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("scorer protocol error: {0}")]
    Protocol(String),

    #[error("missing artifact {}: run the `{stage}` stage first", path.display())]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("artifact {} does not match the hash recorded by `{stage}`; rerun `{stage}`", path.display())]
    StaleArtifact { path: PathBuf, stage: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
