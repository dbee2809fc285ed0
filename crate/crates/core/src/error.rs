use std::path::PathBuf;

use cife_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CifeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("condition width {found} does not match model width {expected}")]
    CondWidth { expected: usize, found: usize },

    #[error("token id {id} is outside the vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("timestep {t} outside [0, {total})")]
    Timestep { t: usize, total: usize },

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("invalid sampler config: {0}")]
    Sampler(String),

    #[error("composition: {0}")]
    Compose(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("freeze violation: {0}")]
    Freeze(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CifeError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CifeError {
    let path = path.into();
    move |source| CifeError::Io { path, source }
}
