//! Config-driven experiments on the toy audio-visual world: two-stage
//! training, held-out evaluation, ablation sweeps, and the validation
//! commands behind the `jova` binary.

use std::io;

use jova_core::flow::FlowError;
use jova_core::model::ModelError;
use jova_core::mouthmask::MaskError;
use jova_core::toyworld::WorldError;
use jova_tensor::{CheckpointError, OptimError, TensorError};
use thiserror::Error;

pub mod ablate;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod run;
pub mod train;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss or gradient at step {step}; parameter norms: {}", format_norms(.norms))]
    NonFinite { step: usize, norms: Vec<(String, f64)> },
    #[error("config hash mismatch ({expected} vs {found}):\n  {}", .diff.join("\n  "))]
    HashMismatch {
        expected: String,
        found: String,
        diff: Vec<String>,
    },
    #[error("{0}")]
    Refused(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn format_norms(norms: &[(String, f64)]) -> String {
    norms
        .iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}
