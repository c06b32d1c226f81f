//! Command-line orchestration: configuration, data ingestion and the
//! experiment drivers behind the `jumpres` binary.

pub mod config;
pub mod run;
pub mod series;

use thiserror::Error;

pub use config::{parse_config, validate_config, RunConfig};
pub use run::{run, Command, RunOutcome};
pub use series::{load_series, SeriesError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] jumpres_core::Error),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 configuration, 3 numerical failure, 4 I/O or data.
    pub fn exit_code(&self) -> i32 {
        use jumpres_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidParameter { .. } | E::NonStationary { .. } | E::IndivisibleEnsemble { .. }) => 2,
            CliError::Core(E::Io(_) | E::InsufficientData(_)) => 4,
            CliError::Core(_) => 3,
            CliError::Series(_) | CliError::Io(_) => 4,
        }
    }
}
