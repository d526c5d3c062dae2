//! File formats, configuration, checkpoints and the command-line driver for
//! [`nadex_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run;

pub use error::{CliError, Result};
