//! Batch front-end for the regcf estimators: configuration, CSV ingestion,
//! command dispatch and machine-readable output.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;

pub use commands::{fit_report, run_command, Convergence, FitReport};
pub use config::{AlphaSpec, Command, FitEstimator, RunConfig};
pub use error::CliError;
pub use ingest::{emit_csv, ingest_csv, IngestedData};

/// Size the global rayon pool. Call at most once, before any parallel work.
pub fn configure_threads(threads: usize) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot configure {threads} threads: {e}")))
}
