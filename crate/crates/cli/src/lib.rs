//! Experiment runner behind the `dln-lab` binary: JSON configs in, CSV
//! trajectories plus `summary.json` and `manifest.json` out.

pub mod config;
pub mod output;
pub mod presets;
pub mod runner;

use std::path::PathBuf;

use dln_core::DlnError;

pub use config::{ExperimentConfig, Kind, TaskSpec};
pub use runner::{execute, Check, RunOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Validation(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] DlnError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::UnknownPreset(_) => EXIT_INVALID,
            CliError::Core(e) => core_exit_code(e),
            CliError::Io { .. } => EXIT_FAILURE,
        }
    }
}

pub fn core_exit_code(e: &DlnError) -> i32 {
    match e {
        DlnError::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}
