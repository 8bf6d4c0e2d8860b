//! Configuration, file formats and the experiment runner.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod runner;
pub mod sweep;

pub use checkpoint::{
    load_checkpoint, load_feature_cache, save_checkpoint, save_feature_cache, Checkpoint, CheckpointMeta,
};
pub use config::{DataSource, ExperimentConfig, ScmRecipe, SweepConfig};
pub use csvio::{load_csv, save_csv};
pub use runner::{
    evaluate_model, load_splits, run_experiment, summarize_dir, summarize_records, ExperimentOutcome,
    MetricsRecord, ModeSummary, Splits, Summary,
};
pub use sweep::{prevalence_sweep, run_sweep, SweepKind, SweepRow};
