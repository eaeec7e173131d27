//! Experiment driver for the cluster-based multiscale pipeline.

pub mod experiment;

pub use experiment::{compare_tables, run, run_to_dir, ExperimentConfig, RunOutput, RunReport};
