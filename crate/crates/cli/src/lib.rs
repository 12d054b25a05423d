//! Command-line driver: one subcommand per pipeline stage, artifacts in a run
//! directory, every stage stamped with the hash of the config it ran under.

pub mod config;
mod error;
pub mod report;
pub mod stages;
pub mod stamp;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use report::cmd_report;
pub use stages::{cmd_eval, cmd_finetune, cmd_gen, cmd_pseudolabel, cmd_retrain, EvalModel, StageSummary};
