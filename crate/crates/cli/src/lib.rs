//! Experiment runner for seqlabel: synthetic corpora, multi-seed training
//! grids, result tables, ablations and label-dependency analysis.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use experiment::{Cell, Experiment, RunRecord};
pub use report::ResultTable;
