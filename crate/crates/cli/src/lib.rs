//! Command-line surface over `icd-core`: configuration, artifact files,
//! SVG plots and the acceptance harness.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod plot;

pub use commands::{error_line, run_args, Cli};
pub use config::RunConfig;
