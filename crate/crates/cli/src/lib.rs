//! Experiment harness for learnability-guided dataset distillation.
//!
//! Every command works on a run directory holding the config, data,
//! trained models, distilled dataset, reports and a manifest that hashes
//! each file. See [`commands`] for the individual steps.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

pub use config::{Method, RunConfig};
pub use error::{CliError, ErrorKind, Result};
