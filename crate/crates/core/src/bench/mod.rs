//! Datasets, experiment configuration, analysis tools and the CLI.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod jobs;
pub mod manifest;

pub use config::{preset, RunConfig};
pub use data::*;
