//! Command-line driver: configuration, artifact IO, the experiment pipeline
//! and SVG reporting.

pub mod commands;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod svg;

pub use commands::{main_with_args, Cli, Command, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
pub use config::ExperimentConfig;
