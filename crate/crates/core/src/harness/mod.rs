//! Configuration, metrics, experiment drivers and run artifacts.

mod config;
mod experiment;
mod metrics;

use thiserror::Error;

pub use config::{AblationFlags, ExperimentConfig};
pub use experiment::{
    collect_demonstrations, demo_task_seed, eval_task_seed, evaluate_policy, imitate, optimize,
    run_ablation,
    run_experiment, run_many, sweep_cost, train_policy, train_task_seed, write_iterations_csv,
    write_metrics_csv, write_series_tsv, write_sessions_jsonl, write_sweep_csv, RunManifest,
    RunResult, SweepRow, TrainedPolicy,
};
pub use metrics::{
    compute_metrics, outcomes_from_rates, spearman, trend_report, EvalReport, TrendReport,
    WindowStats, TREND_WINDOW,
};

use crate::env::EnvError;
use crate::learn::LearnError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no session records")]
    EmptyRecords,
    #[error("need at least {needed} sessions for two windows, got {got}")]
    TooFewSessions { needed: usize, got: usize },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
