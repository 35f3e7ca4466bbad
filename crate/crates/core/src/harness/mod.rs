//! Experiment configuration, the variant grid, and report files.

mod config;
mod experiment;
mod report;
mod variant;

pub use config::{
    BatchSettings, DataSpec, ExperimentConfig, FilterSettings, ModelConfig, NoiseConfig,
    OptimizerSettings, Seeds, TeacherSettings, ValidationMode,
};
pub use experiment::{
    build_splits, run_experiment, IterationSummary, ResolvedEcho, RunReport, Splits,
    SCHEMA_VERSION,
};
pub use report::{
    ablation_csv, emit_report, read_report, run_ablation_suite, AblationRow, CURVES_FILE,
    FILTER_FILE, SUMMARY_FILE, TABLE_FILE,
};
pub use variant::{resolve, Resolved, Variant};
