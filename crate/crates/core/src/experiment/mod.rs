//! Config-driven orchestration of the model-version selection experiments.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, InflationChoice, LocalizationConfig, FULL_ASSESSMENT_CYCLES};
pub use report::{write_radius_sweep, write_selection_outputs, write_window_sweep, RunManifest};
pub use runner::{
    build_twin, gridpoint_weights, run_radius_sweep, run_selection_experiment,
    run_selection_on_twin, run_window_sweep, tune_inflation, DaContext, ModelRun, ModelVersion,
    RadiusSweepRow, RecordOptions, SelectionCell, SelectionExperiment, TuningLog,
};
