//! Error type for model construction, training, and inference.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] resplat_autodiff::AutodiffError),
    #[error(transparent)]
    Data(#[from] resplat_data::DataError),
    #[error(transparent)]
    Core(#[from] resplat_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
}
