//! Experiment runner around the `adabatch` core: TOML configs, run
//! directories with JSONL logs, parameter checkpoints and long-format plot
//! CSVs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod logfile;
pub mod plot;

use adabatch::Error as CoreError;

/// Exit status 1 for bad input, 2 for failures while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(anyhow::anyhow!("{msg}"))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_)
            | CoreError::Spec(_)
            | CoreError::StepSizeViolation { .. }
            | CoreError::StepSizeTooLarge { .. }
            | CoreError::NonConvex(_)
            | CoreError::NonPositiveRegularization
            | CoreError::NotPositiveDefinite
            | CoreError::UnknownSegment(_)
            | CoreError::Parse { .. }
            | CoreError::NegativeComponent(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
