//! Pipeline driver behind the `pixplan` binary: experiment configuration,
//! the on-disk artifact layout, and the stage implementations.
//!
//! A run lives in one directory. `generate-data` freezes the resolved
//! configuration into `manifest.json` there; every later stage reads the
//! manifest back, so the directory is self-describing and any stage can be
//! re-run from it alone.

pub mod artifacts;
pub mod config;
pub mod external;
pub mod stages;

/// Anything a stage can fail with. Core errors pass through transparently
/// so the message the user sees is the one closest to the fault.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{artifact} is missing; run `pixplan {producer}` first")]
    Missing { artifact: String, producer: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Domain(#[from] pixplan::domains::DomainError),
    #[error(transparent)]
    Train(#[from] pixplan::models::train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] pixplan::models::checkpoint::CheckpointError),
    #[error(transparent)]
    Extract(#[from] pixplan::extraction::ExtractError),
    #[error(transparent)]
    Pddl(#[from] pixplan::strips::pddl::PddlError),
    #[error(transparent)]
    Strips(#[from] pixplan::strips::StripsError),
    #[error(transparent)]
    Validate(#[from] pixplan::validate::ValidateError),
    #[error(transparent)]
    Metrics(#[from] pixplan::metrics::MetricsError),
}
