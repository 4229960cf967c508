use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("time window must contain at least one step")]
    EmptyWindow,

    #[error("channel {channel} has degenerate spread (std {std:e})")]
    DegenerateChannel { channel: usize, std: f64 },

    #[error("invertible linear map in flow step {step} is singular (log|det| = {log_det})")]
    SingularWeight { step: usize, log_det: f64 },

    #[error("non-finite likelihood in flow step {step}")]
    NonFiniteLikelihood { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
