//! Batch front-end for `qndsim`: run files, experiment orchestration and artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod replay;
pub mod report;

pub use config::{parse_config, RunConfig};
pub use error::CliError;
