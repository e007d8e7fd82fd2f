//! Experiment orchestration: configuration, dataset ingestion, seeded
//! trial/sweep execution and report emission.

pub mod config;
pub mod idx;
pub mod report;
pub mod runner;
pub mod synth;

pub use config::{DatasetConfig, EstimatorSource, ExperimentConfig, ModelConfig};
pub use idx::{load_idx_dataset, save_idx_dataset};
pub use report::{Aggregate, RunReport, SweepReport, SweepRow, TrialReport};
pub use runner::{
    hash64, parse_distribution, run_config, run_sweep, synthetic_mlp_config, trial_seed,
    Experiment, SweepAxis,
};
pub use synth::{gen_synthetic_dataset, SyntheticSpec};
