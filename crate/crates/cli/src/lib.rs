//! File formats, configuration, and experiment drivers around
//! `handprint-core`: PNG/JSON/CSV/SVG on disk, checkpoint containers, and
//! the subcommand implementations behind the `handprint` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod manifest;
pub mod models;
pub mod plot;
pub mod pngio;

pub use config::RunConfig;
pub use error::CliError;
