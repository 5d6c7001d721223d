//! Library half of the `patchpure` binary: experiment configuration, the
//! run-directory artifact store, and the subcommand implementations. The
//! binary in `main.rs` is a thin argument-parsing shell over this so the
//! whole pipeline is drivable in-process by integration tests.

pub mod commands;
pub mod config;
pub mod rundir;

use thiserror::Error;

/// Command failures, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or a failing operation: exit code 1.
    #[error("{0}")]
    Validation(String),
    /// A required artifact from an earlier stage is missing: exit code 2.
    #[error("missing dependency: {0}")]
    Dependency(String),
    /// An explicit acceptance check did not hold: exit code 3.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Dependency(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

macro_rules! from_core_error {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Validation(e.to_string())
            }
        })*
    };
}

from_core_error!(
    patchpure_core::data::DataError,
    patchpure_core::models::ModelsError,
    patchpure_core::attack::AttackError,
    patchpure_core::defense::DefenseError,
    patchpure_core::eval::EvalError
);
