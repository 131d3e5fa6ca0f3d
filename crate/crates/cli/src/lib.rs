//! Configuration and orchestration for `fedmix` experiments.

pub mod config;
pub mod experiment;

pub use config::{load_config, parse_config, preset, ExperimentConfig, GridPoint};
pub use experiment::{run_experiment, run_sweep, ExperimentOutput, Manifest, RunSeeds, SweepRow};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
mod book {}
