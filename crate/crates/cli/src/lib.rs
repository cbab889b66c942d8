//! Run configuration and pipeline commands behind the `skelflow` binary.

pub mod config;
pub mod run;

pub use config::RunConfig;
pub use run::{run, Command, Outcome};
