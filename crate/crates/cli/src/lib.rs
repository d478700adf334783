//! Experiment orchestration for the continual pre-training engine: runs the arm matrix
//! over seeds and model sizes, writes per-cell checkpoints and metrics, and renders the
//! comparison tables, scaling fits and plots.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod csvio;
pub mod plot;
pub mod report;
pub mod run;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),
    #[error("cannot parse config {0}: {1}")]
    ConfigParse(PathBuf, String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("output directory {0} is not writable: {1}")]
    Unwritable(PathBuf, #[source] std::io::Error),
    #[error("{0} was produced with a different experiment configuration; use a fresh --out")]
    ConfigMismatch(PathBuf),
    #[error("{0} holds an unfinished cell; rerun with --resume to discard and redo it")]
    UnfinishedCell(PathBuf),
    #[error("nothing to report in {0}: no completed cells")]
    NothingToReport(PathBuf),
    #[error("malformed metrics in {0}: {1}")]
    Metrics(PathBuf, String),
    #[error("cell {cell}: {source}")]
    Engine { cell: String, source: cpt_core::engine::EngineError },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
