//! Metrics, experiment configuration and orchestration.

mod ablation;
mod config;
mod experiment;
mod metrics;

pub use crate::engine::confidence_fraction;
pub use ablation::{
    ablate, ablate_cached, ablate_subset, ablation_profile, preset_runs, worker_threads, AblationRow, AblationSummary,
    OrderingCheck, Preset, RunCache, SeedRun,
};
pub use config::{DataConfig, ExperimentConfig, ModelConfig, RunConfig};
pub use experiment::{
    eval_header, eval_row, evaluate, evaluate_checkpoint, load_corpus, metrics_row, predict_labels, run_experiment,
    run_with_corpus, EvalPoint, RunArtifacts, EVAL_CSV, FINAL_CHECKPOINT, METRICS_CSV, METRICS_HEADER, REPORT_FILE,
};
pub use metrics::{confusion, miou, ConfusionMatrix, MiouReport};
