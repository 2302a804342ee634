use std::path::PathBuf;

/// Errors raised by the engine, models and harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io { context: context(), source })
    }
}
