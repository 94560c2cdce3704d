//! Average precision and the experiment harnesses built on it.

pub mod ap;
pub mod experiments;

pub use ap::{average_precision, PRCurve};
pub use experiments::{
    ablation_run, fov_sweep, limited_data_run, median, Experiment, ExperimentReport,
    LimitedDataReport, RunResult,
};
pub use experiments::{format_table, fov_csv, subsample, synthetic_experiment_config, to_jsonl};
