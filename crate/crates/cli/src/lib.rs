//! Command implementations behind the `andft` binary.

pub mod commands;
pub mod config;
pub mod csv;

use andft_core::checkpoint::CheckpointError;
use andft_core::data_synth::DataError;
use andft_core::eval::EvalError;
use andft_core::nn_core::NnError;
use andft_core::trainers::TrainError;

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Nn(NnError::Numeric(_)) => CliError::Numeric(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

/// Worker cap from `ANDFT_THREADS` (or `TOOL_THREADS`), else the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    ["ANDFT_THREADS", "TOOL_THREADS"]
        .iter()
        .find_map(|k| std::env::var(k).ok()?.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
