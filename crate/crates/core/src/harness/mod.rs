//! Experiment harness: configuration, seeding, the online run loop, compute
//! accounting, windowed-error metrics, multi-seed orchestration, and
//! CSV/checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod ops;
pub mod run;

pub use config::{load_config, parse_config, EnvKind, ExperimentConfig, Topology};
pub use ops::{estimate_ops, mean_relative, measure_ops, normalized_error};
pub use run::{
    run_experiment, run_seed, summarize, CurveRow, Engine, ExperimentOutcome, OnlineRun, RunStats,
    SeedOutcome, StepOutcome,
};
