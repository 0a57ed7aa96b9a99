//! Experiment harness: dataset generators, training and evaluation loops,
//! the toy study, the verification suite and report files.

pub mod config;
pub mod data;
mod error;
pub mod evaluate;
pub mod report;
pub mod sweep;
pub mod toy;
pub mod train;
pub mod verify;

pub use error::{CliError, CliResult};
