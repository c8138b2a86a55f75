//! Command-line driver for `budlora-core`: run configuration, the
//! checkpoint container, a thread-pool executor and the pipeline commands
//! (`pretrain`, `distill`, `compress`, `eval`, `report`).

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
pub use exec::Pool;
