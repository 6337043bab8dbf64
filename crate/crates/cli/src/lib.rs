//! Batch experiment runner: config parsing, task execution and artifact
//! manifests for the `turnpike-lab` binary.

pub mod config;
pub mod runner;

pub use config::{parse, validate, Diagnostic, ExperimentConfig};
pub use runner::{run_experiment, Manifest, ManifestEntry, MANIFEST_NAME};
