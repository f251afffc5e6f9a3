//! Experiment plumbing: datasets, configuration, Table 1 runs, figures.

pub mod calibrate;
pub mod config;
pub mod dataset;
pub mod figures;
pub mod scenario;
pub mod table1;

use crate::gridworld::GridError;
use crate::worldmodel::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("step budget exceeded: {0}")]
    Budget(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for budget or
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Model(ModelError::UnknownPreset(_)) => 2,
            HarnessError::Budget(_) | HarnessError::Model(ModelError::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
