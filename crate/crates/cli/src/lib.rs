//! Reproducible experiment runner for `diffinfo`.

pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use manifest::Manifest;
