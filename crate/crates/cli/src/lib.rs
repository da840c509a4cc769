//! Sweep planning, resumable execution over an append-only store, and the
//! scaling report.

pub mod commands;
pub mod config;
pub mod plan;
pub mod report;
pub mod runner;
pub mod store;

use drivescale_core::closed_loop::ClosedLoopError;
use drivescale_core::eval::EvalError;
use drivescale_core::fit::FitError;
use drivescale_core::ledger::LedgerError;
use drivescale_core::synth::SynthError;
use drivescale_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("job failed: {0}")]
    Job(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Job(_) => 3,
            CliError::Fit(_) => 4,
            CliError::Store(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Job(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Job(e.to_string())
    }
}

impl From<ClosedLoopError> for CliError {
    fn from(e: ClosedLoopError) -> Self {
        CliError::Job(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        CliError::Fit(e.to_string())
    }
}
