//! Experiment harness: datasets, seeded sampling, runs, scaling curves, reports.

pub mod dataset;
pub mod experiment;
pub mod report;
pub mod sampling;
pub mod scaling;
pub mod synthetic;

pub use dataset::{check_labels, load_dataset, write_dataset};
pub use experiment::{
    mean_std, predict, run_experiment, ExperimentConfig, Method, PredictionRecord, RunResult, SeedResult,
    DEFAULT_TEST_LIMIT,
};
pub use report::{emit_report, ReportFormat};
pub use sampling::{subsample, SamplePlan, SampleScope};
pub use scaling::{power_law_fit, scaling_curve, scaling_runs, PowerLawFit, ScalingPoint};
