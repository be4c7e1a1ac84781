use std::path::PathBuf;

use thiserror::Error;
use vip_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),
    #[error("non-finite loss {loss} at iteration {iter}")]
    NonFiniteLoss { iter: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CoreError::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status for the CLI: 2 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::NonFiniteLoss { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
