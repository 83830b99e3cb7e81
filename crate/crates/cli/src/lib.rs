//! Experiment runner for the deltalab laboratory: configs, subcommands and
//! reproducible artifacts.

pub mod config;
pub mod manifest;
pub mod runs;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
