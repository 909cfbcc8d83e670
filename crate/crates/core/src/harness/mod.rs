//! Experiment orchestration: configuration, training loops, evaluation,
//! checkpoints, metrics and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod train;

use std::path::Path;

use thiserror::Error;

use crate::cells::CellError;
use crate::data::DataError;
use crate::grad::GradError;
use crate::optim::OptimError;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Task};
pub use metrics::{MetricsRecord, RecordKind};
pub use train::{evaluate, EvalData, RunOutcome, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: {detail}; last good state saved to {checkpoint}")]
    Diverged {
        step: u64,
        detail: String,
        checkpoint: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::NotFound(path.display().to_string())
        } else {
            HarnessError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        }
    }
}
