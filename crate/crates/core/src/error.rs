use amtpp_autodiff::TensorError;
use thiserror::Error;

use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum AmtppError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown station {station} (model covers {stations} stations)")]
    UnknownStation { station: usize, stations: usize },

    #[error("entropy rate needs a sequence of length >= 2, got {0}")]
    EntropyUndefined(usize),

    #[error("loss became non-finite at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
        last_good: Box<Checkpoint>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AmtppError>;

impl AmtppError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        AmtppError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
