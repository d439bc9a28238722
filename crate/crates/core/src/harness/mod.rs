//! Experiment harness: configuration files, result serialization, the
//! independent discrete-time oracle, and the pipelines the command line
//! dispatches to. Everything downstream of a parsed config lives here so
//! the binary stays a thin argument-and-exit-code shell.

pub mod config;
pub mod experiments;
pub mod io;
pub mod oracle;

pub use config::{ConfigError, ExperimentConfig, Tolerances};
pub use experiments::{HarnessError, RunContext};
pub use io::{read_snapshot, write_snapshot, Estimate, RunManifest, SnapshotError};
