//! Command-line driver: run configuration, checkpoints, metrics files,
//! heatmaps and the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod heatmap;
pub mod metrics;
