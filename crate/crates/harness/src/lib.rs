//! Configuration, synthetic scenes, training loops, metrics and image I/O
//! around `erm-core`, plus the pieces of the `erm` command-line tool.

pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod scene;
pub mod train;

pub use config::ExperimentConfig;
