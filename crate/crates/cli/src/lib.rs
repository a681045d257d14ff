//! Command-line front end: ingest, forecast, evaluate and lag sweeps driven
//! by a flat run configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod hub;

pub use commands::{cmd_evaluate, cmd_forecast, cmd_ingest, cmd_lag_sweep, cmd_synth};
pub use config::RunConfig;
pub use error::CliError;
