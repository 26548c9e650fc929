//! Experiment orchestration on top of `iblm-core`: run configuration,
//! optimizers, the training loop with its step log, gradient scans, the
//! conflicting-teacher suite and comparison reports.

pub mod config;
pub mod gradscan;
pub mod log;
pub mod optim;
pub mod report;
pub mod suite;
pub mod train;
pub mod workload;

use thiserror::Error;

pub use config::{ConfigError, ControllerMode, Experiment, RunConfig};
pub use log::{RunLog, RunStatus, RunSummary, StepRecord};
pub use train::{run, run_grad_scan, train};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("run aborted on a non-finite value: {0}")]
    NonFinite(String),
    #[error("cannot compare runs: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] iblm_core::nets::NetError),
    #[error(transparent)]
    Task(#[from] iblm_core::tasks::TaskError),
    #[error(transparent)]
    Entropy(#[from] iblm_core::entropy::EntropyError),
    #[error(transparent)]
    Gapt(#[from] iblm_core::gapt::GaptError),
    #[error(transparent)]
    Autograd(#[from] iblm_core::AutogradError),
    #[error(transparent)]
    Diagnostics(#[from] iblm_core::diagnostics::DiagnosticsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
