//! File formats, experiment orchestration and report emission for `scq-core`.
//!
//! - [`dataset_io`]: the binary `SCQD` dataset format and its CSV export.
//! - [`checkpoint`]: JSON manifest plus little-endian `f32` tensors.
//! - [`config`]: experiment configs (JSON, unknown keys rejected) and their hash.
//! - [`metrics`]: self-describing metrics CSV files.
//! - [`experiment`]: seed sweeps, the α sweep, the dataset-fraction study.
//! - [`verify`]: batch verification of the linear-MDP guarantees.
//! - [`plot`]: deterministic SVG learning curves.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod experiment;
pub mod fsutil;
pub mod metrics;
pub mod plot;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("dataset {0} not found and generation is disabled")]
    MissingDataset(PathBuf),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Agent(#[from] scq_core::agent::AgentError),
    #[error(transparent)]
    Env(#[from] scq_core::env::EnvError),
    #[error(transparent)]
    Linear(#[from] scq_core::linear::LinearError),
    #[error(transparent)]
    Nn(#[from] scq_core::nn::NnError),
}

pub type Result<T> = std::result::Result<T, LabError>;
