//! Commands behind the `spen` binary: dataset generation, training,
//! prediction, evaluation and gradient checks, all driven by an experiment
//! config file.

pub mod checkpoint;
pub mod commands;
mod data;
mod outputs;

use spen_core::SpenError;
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use commands::{
    eval, gen_data, gradcheck, predict, train, EvalReport, EvalSource, GradcheckOptions,
    GradcheckReport, PredictOptions, TrainSummary,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Spen(#[from] SpenError),

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: worst relative error {worst:e} exceeds {tolerance:e}")]
    CheckFailed { worst: f64, tolerance: f64 },
}

impl CliError {
    /// Process exit status: 1 for invalid input, 2 for runtime failures and
    /// 3 for a failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Spen(e) if e.is_validation() => 1,
            CliError::Spen(_) => 2,
            CliError::CheckFailed { .. } => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Spen(SpenError::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
