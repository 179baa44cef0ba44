//! Configuration, commands and reports behind the `dpa` binary.

pub mod bench;
pub mod commands;
pub mod config;
pub mod report;

pub use config::{BenchConfig, Preset, RunConfig, SweepConfig};
