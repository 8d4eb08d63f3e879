use std::path::PathBuf;

use graf_diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum GrafError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("png: {reason} (byte {offset})")]
    Png { offset: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite {what} at iteration {iteration} (batch seed {seed:#018x})")]
    NonFinite { what: String, iteration: u64, seed: u64 },
}

pub type Result<T, E = GrafError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> GrafError {
    let path = path.into();
    move |source| GrafError::Io { path, source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> GrafError {
    GrafError::Invalid(msg.into())
}
