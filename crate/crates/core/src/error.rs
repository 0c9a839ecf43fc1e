use crome_autodiff::AutodiffError;
use thiserror::Error;

use crate::train::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CromeError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("out-of-vocabulary word {0:?}")]
    UnknownWord(String),
    #[error("non-finite loss {value} at step {step} of stage {stage}")]
    NonFiniteLoss { stage: String, step: usize, value: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("stage {stage} needs the {required} checkpoint; run `train --stage {required}` first or pass --checkpoint")]
    MissingPrerequisite { stage: String, required: String },
    #[error("task leakage: {0}")]
    Leakage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CromeError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CromeError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = CromeError> = std::result::Result<T, E>;
