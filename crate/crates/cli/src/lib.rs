//! Experiment layer over `voxreg-core`: flat-file configuration, synthetic
//! paired volumes with exact ground-truth deformations, train/register
//! drivers with JSON reporting, and classification metrics.

pub mod config;
pub mod metrics;
pub mod runner;
pub mod synthetic;

pub use config::{ExperimentConfig, ModeSpec, Preset, RemapSpec};
pub use metrics::{compute_metrics, Metrics};
pub use runner::{run_gen, run_metrics, run_register, run_train, RegisterReport, TrainReport};
pub use synthetic::{endpoint_error, generate_case, GenConfig, SyntheticCase};
