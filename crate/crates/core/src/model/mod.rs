//! Joint video-audio transformer predicting flow velocities for both
//! modalities.

mod config;
mod network;
mod params;
mod rope;

use jova_tensor::{CheckpointError, TensorError};
use thiserror::Error;

pub use config::{Fusion, ModelConfig, RopeMode};
pub use network::{
    sinusoid, ConditionSet, JovaModel, Modality, Segments, Stage, TokenSequence, NULL_TOKEN,
};
pub use params::ParamStore;
pub use rope::{rope_frequency, rope_position, RopeTables};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
