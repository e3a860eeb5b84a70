//! Command-line driver: run configuration, the five pipeline commands and
//! map rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;

pub use commands::EncoderSource;
pub use config::{AblationGrid, RunConfig};
pub use error::CliError;
