use std::path::PathBuf;

/// Errors surfaced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("chunk index {got} is not greater than the last stored index {last}")]
    NonMonotoneChunk { got: usize, last: usize },
    #[error("replay diverged from the recorded pass by {diff:e} on chunk {chunk}")]
    ReplayDivergence { chunk: usize, diff: f64 },
    #[error("cache was built for a different model configuration")]
    CacheConfig,
    #[error("empty batch")]
    EmptyBatch,
    #[error("condition mismatch: {0}")]
    Condition(String),
    #[error("reference exhausted at chunk {0}")]
    ReferenceExhausted(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
