use std::path::PathBuf;

use sf_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: String, got: String },

    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    BadToken { id: usize, vocab: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("no foreground patches to probe")]
    NoForeground,
}

pub type Result<T> = std::result::Result<T, ModelError>;
