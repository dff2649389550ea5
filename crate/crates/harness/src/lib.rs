//! Synthetic tasks, training loops, the four-way transform ablation and
//! the pieces of the `prodial` command line.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod optim;
pub mod tasks;
pub mod train;

pub use config::ExperimentConfig;
