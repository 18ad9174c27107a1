use std::path::PathBuf;

use pavescan_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::LabelError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {reason}")]
    Image { path: String, reason: String },

    #[error(transparent)]
    Label(#[from] LabelError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        component: &'static str,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
