//! Experiment orchestration: configs, the task loop, checkpoints and reports.

mod analyze;
mod checkpoint;
mod config;
mod report;
mod runner;

pub use analyze::{analyze, dims_table, jsd_rows, variance_curves, AnalyzeMode, AnalyzeOptions};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RngState,
};
pub use config::{
    AlphaSetting, Benchmark, CriterionSetting, DropoutSetting, EpsSetting, ExperimentConfig, GranularitySetting,
    KSetting,
};
pub use report::{compare_runs, mean_std, read_metrics, variant_of, write_comparison_csv, MetricsRow, VariantSummary};
pub use runner::{build_stream, checkpoint_path, run_experiment, RunOptions, RunOutcome, Session, TaskReport};
