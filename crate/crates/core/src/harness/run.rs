use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, UpdateStats};
use super::buffer::{ReplayBuffer, Transition};
use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{mean_std, MetricsRow, MetricsWriter, Phase};
use crate::decision::Source;
use crate::envs::{AnyEnv, Env};
use crate::error::{Error, Result};
use crate::world_model::SegmentBatch;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ABORT_CHECKPOINT_FILE: &str = "checkpoint-abort.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

const STREAM_INIT: u64 = 0;
const STREAM_ENV: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_UPDATE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const EVAL_SEED_BASE: u64 = 1 << 40;

/// Independent deterministic random streams derived from one run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Environment seed of evaluation episode `i`; the same for every mode.
pub fn eval_env_seed(run_seed: u64, i: usize) -> u64 {
    EVAL_SEED_BASE.wrapping_add(run_seed.wrapping_mul(100_003)).wrapping_add(i as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    /// `None` for random warm-up actions.
    pub source: Option<Source>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub cost: f64,
    pub length: usize,
    pub plan_steps: usize,
    /// Steps chosen by the agent (not random warm-up).
    pub agent_steps: usize,
    pub trace: Option<Vec<StepTrace>>,
}

impl EpisodeStats {
    fn new(record: bool) -> Self {
        Self { episode_return: 0.0, cost: 0.0, length: 0, plan_steps: 0, agent_steps: 0, trace: record.then(Vec::new) }
    }

    fn push(&mut self, observation: &[f64], action: &[f64], reward: f64, cost: f64, source: Option<Source>) {
        self.episode_return += reward;
        self.cost += cost;
        self.length += 1;
        if let Some(s) = source {
            self.agent_steps += 1;
            if s == Source::Plan {
                self.plan_steps += 1;
            }
        }
        if let Some(t) = &mut self.trace {
            t.push(StepTrace { observation: observation.to_vec(), action: action.to_vec(), reward, cost, source });
        }
    }

    /// Fraction of agent-chosen steps that executed the plan action.
    pub fn balance(&self) -> Option<f64> {
        (self.agent_steps > 0).then(|| self.plan_steps as f64 / self.agent_steps as f64)
    }

    pub fn cost_rate(&self) -> f64 {
        self.cost / self.length.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeStats>,
    pub return_mean: f64,
    pub return_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub cost_rate_mean: f64,
    /// Mean over episodes where the balance is defined.
    pub balance_mean: Option<f64>,
}

impl EvalSummary {
    pub fn from_episodes(episodes: Vec<EpisodeStats>) -> Self {
        let returns: Vec<f64> = episodes.iter().map(|e| e.episode_return).collect();
        let costs: Vec<f64> = episodes.iter().map(|e| e.cost).collect();
        let rates: Vec<f64> = episodes.iter().map(EpisodeStats::cost_rate).collect();
        let balances: Vec<f64> = episodes.iter().filter_map(EpisodeStats::balance).collect();
        let (return_mean, return_std) = mean_std(&returns);
        let (cost_mean, cost_std) = mean_std(&costs);
        Self {
            return_mean,
            return_std,
            cost_mean,
            cost_std,
            cost_rate_mean: mean_std(&rates).0,
            balance_mean: (!balances.is_empty()).then(|| mean_std(&balances).0),
            episodes,
        }
    }
}

/// Plays one episode to its end with the agent acting.
pub fn run_episode(
    env: &mut AnyEnv,
    agent: &mut Agent,
    env_seed: u64,
    explore: bool,
    rng: &mut dyn RngCore,
    record: bool,
) -> Result<EpisodeStats> {
    let mut obs = env.reset(env_seed);
    agent.reset_episode();
    let mut stats = EpisodeStats::new(record);
    loop {
        let act = agent.act(&obs, explore, rng)?;
        let r = env.step(&act.action)?;
        stats.push(&obs, &act.action, r.reward, r.cost, Some(act.source));
        if r.done() {
            return Ok(stats);
        }
        obs = r.observation;
    }
}

/// Deterministic evaluation: `episodes` episodes with policy means, planning
/// and switching active. Leaves `agent` untouched.
pub fn evaluate_agent(agent: &Agent, cfg: &RunConfig, episodes: usize, record: bool) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut env = cfg.env.build()?;
    let mut agent = agent.clone();
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let seed = eval_env_seed(cfg.seed, i);
        let mut rng = stream_rng(seed, STREAM_EVAL);
        out.push(run_episode(&mut env, &mut agent, seed, false, &mut rng, record)?);
    }
    Ok(EvalSummary::from_episodes(out))
}

/// Loads a checkpoint and evaluates it with the run's own environment config.
pub fn evaluate(checkpoint: &Path, episodes: usize) -> Result<EvalSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    evaluate_agent(&ckpt.agent, &ckpt.config, episodes, false)
}

pub const MANIFEST_FORMAT: &str = "spowl-run";
pub const MANIFEST_VERSION: u32 = 1;

/// `manifest.json`: what produced a run directory and where its files are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub seed: u64,
    pub mode: String,
    pub steps: usize,
    pub episodes: usize,
    pub observation_dim: usize,
    pub action_dim: usize,
    pub metrics: String,
    pub checkpoint: String,
    pub final_return_mean: f64,
    pub final_cost_mean: f64,
    pub final_balance_mean: Option<f64>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Load(format!("{}: unsupported manifest {} v{}", path.display(), m.format, m.version)));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub episodes: usize,
    /// Cumulative training cost over steps.
    pub cost_rate: f64,
    pub final_eval: EvalSummary,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    episode: usize,
    error: String,
    last_update: Option<&'a UpdateStats>,
    lambda: f64,
    mu: f64,
}

fn eval_rows(summary: &EvalSummary, phase: Phase, step: usize, last: Option<&UpdateStats>) -> Vec<MetricsRow> {
    summary
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| row(phase, step, i, e, e.cost_rate(), last))
        .collect()
}

fn row(phase: Phase, step: usize, episode: usize, e: &EpisodeStats, cost_rate: f64, last: Option<&UpdateStats>) -> MetricsRow {
    MetricsRow {
        phase,
        step,
        episode,
        episode_length: e.length,
        episode_return: e.episode_return,
        episode_cost: e.cost,
        cost_rate,
        balance: e.balance(),
        delta: last.map(|s| s.delta),
        lambda: last.map(|s| s.lambda),
        mu: last.map(|s| s.mu),
        model_loss: last.map(|s| s.model.total),
        policy_loss: last.map(|s| s.policy_loss),
        consistency_loss: last.map(|s| s.model.consistency),
        reward_loss: last.map(|s| s.model.reward),
        value_loss: last.map(|s| s.model.value),
        cost_loss: last.map(|s| s.model.cost),
        cost_value_loss: last.map(|s| s.model.cost_value),
    }
}

/// Trains one agent and writes `config.toml`, `metrics.csv`,
/// `checkpoint.json` and `manifest.json` into `out_dir`. Non-finite training
/// state aborts the run after writing `checkpoint-abort.json` and
/// `diagnostic.json`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;

    let mut env = cfg.env.build()?;
    let (obs_dim, action_dim) = (env.observation_dim(), env.action_dim());
    let mut agent = Agent::new(cfg, obs_dim, action_dim, &mut stream_rng(cfg.seed, STREAM_INIT))?;
    let mut env_seeds = stream_rng(cfg.seed, STREAM_ENV);
    let mut act_rng = stream_rng(cfg.seed, STREAM_ACT);
    let mut update_rng = stream_rng(cfg.seed, STREAM_UPDATE);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut metrics = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let segment_len = cfg.world_model.horizon + 1;

    let mut obs = env.reset(env_seeds.random());
    agent.reset_episode();
    let mut episode = 0usize;
    let mut stats = EpisodeStats::new(false);
    let mut total_cost = 0.0;
    let mut last: Option<UpdateStats> = None;

    for step in 0..cfg.total_steps {
        let (action, source) = if step < cfg.seed_steps {
            ((0..action_dim).map(|_| act_rng.random_range(-1.0..=1.0)).collect(), None)
        } else {
            let a = agent.act(&obs, true, &mut act_rng)?;
            (a.action, Some(a.source))
        };
        let r = env.step(&action)?;
        total_cost += r.cost;
        stats.push(&obs, &action, r.reward, r.cost, source);
        buffer.push(Transition {
            observation: std::mem::take(&mut obs),
            action,
            reward: r.reward,
            cost: r.cost,
            next_observation: r.observation.clone(),
            terminated: r.terminated,
            episode_end: r.done(),
            episode: episode as u64,
        });
        obs = r.observation.clone();

        if step >= cfg.seed_steps {
            for _ in 0..cfg.updates_per_step {
                let segments = match buffer.sample(cfg.batch_size, segment_len, &mut update_rng) {
                    Ok(s) => s,
                    Err(Error::Usage(_)) => break,
                    Err(e) => return Err(e),
                };
                let batch = SegmentBatch::from_segments(&segments)?;
                match agent.update(&batch, &mut update_rng) {
                    Ok(s) => last = Some(s),
                    Err(e @ Error::Training(_)) => {
                        log::error!("aborting at step {step}: {e}");
                        let diag = Diagnostic {
                            step,
                            episode,
                            error: e.to_string(),
                            last_update: last.as_ref(),
                            lambda: agent.lagrangian.lambda,
                            mu: agent.lagrangian.mu,
                        };
                        std::fs::write(out_dir.join(DIAGNOSTIC_FILE), serde_json::to_vec_pretty(&diag)?)?;
                        Checkpoint::new(step, episode, cfg.clone(), agent).save(&out_dir.join(ABORT_CHECKPOINT_FILE))?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        if r.done() {
            let rate = total_cost / (step + 1) as f64;
            metrics.write(&row(Phase::Train, step + 1, episode, &stats, rate, last.as_ref()))?;
            log::info!(
                "step {} episode {episode}: return {:.3} cost {} balance {:?}",
                step + 1,
                stats.episode_return,
                stats.cost,
                stats.balance()
            );
            episode += 1;
            stats = EpisodeStats::new(false);
            obs = env.reset(env_seeds.random());
            agent.reset_episode();
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let summary = evaluate_agent(&agent, cfg, cfg.eval_episodes, false)?;
            log::info!("eval at {}: return {:.3} cost {:.3}", step + 1, summary.return_mean, summary.cost_mean);
            for r in eval_rows(&summary, Phase::Eval, step + 1, last.as_ref()) {
                metrics.write(&r)?;
            }
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            Checkpoint::new(step + 1, episode, cfg.clone(), agent.clone()).save(&out_dir.join(format!("checkpoint-{}.json", step + 1)))?;
        }
    }

    let final_eval = evaluate_agent(&agent, cfg, cfg.final_eval_episodes, false)?;
    for r in eval_rows(&final_eval, Phase::Final, cfg.total_steps, last.as_ref()) {
        metrics.write(&r)?;
    }
    Checkpoint::new(cfg.total_steps, episode, cfg.clone(), agent).save(&out_dir.join(CHECKPOINT_FILE))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        mode: cfg.mode.name().to_string(),
        steps: cfg.total_steps,
        episodes: episode,
        observation_dim: obs_dim,
        action_dim,
        metrics: METRICS_FILE.to_string(),
        checkpoint: CHECKPOINT_FILE.to_string(),
        final_return_mean: final_eval.return_mean,
        final_cost_mean: final_eval.cost_mean,
        final_balance_mean: final_eval.balance_mean,
        config: cfg.clone(),
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        steps: cfg.total_steps,
        episodes: episode,
        cost_rate: total_cost / cfg.total_steps as f64,
        final_eval,
    })
}
