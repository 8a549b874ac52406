//! File formats, checkpoints, reports and the command-line workflow around
//! `evcap-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod simdump;

pub use error::{CliError, Result};
