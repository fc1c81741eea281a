//! Training, evaluation and ablation runs with their on-disk artifacts.

mod ablate;
mod agent;
mod buffer;
mod checkpoint;
mod config;
mod metrics;
mod run;

pub use ablate::{ablate, run_ablation, AblationGrid, AblationReport, AblationRun, AblationSummary, Variant, RUNS_FILE, SUMMARY_FILE};
pub use agent::{Act, Agent, UpdateStats};
pub use buffer::{ReplayBuffer, Transition};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Mode, RunConfig};
pub use metrics::{mean_std, read_metrics, MetricsRow, MetricsWriter, Phase};
pub use run::{
    eval_env_seed, evaluate, evaluate_agent, run_episode, stream_rng, train, EpisodeStats, EvalSummary, Manifest, RunSummary, StepTrace,
    ABORT_CHECKPOINT_FILE, CHECKPOINT_FILE, CONFIG_FILE, DIAGNOSTIC_FILE, MANIFEST_FILE, METRICS_FILE,
};
