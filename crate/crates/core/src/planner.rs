//! Sampling-based model-predictive control in latent space.
//!
//! Each call to [`plan`] rolls the policy through the model to build a prior
//! set, then runs a few rounds of sample → estimate → select → refit on a
//! diagonal Gaussian over `H`-step action sequences. In adaptive mode the
//! selection thresholds are the prior set's mean reward and cost estimates; the
//! CCE modes use a fixed cost limit instead.

use std::cmp::Ordering;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Batched latent-space model queried by the planner. Every method takes one
/// latent and one action per row.
pub trait LatentModel {
    fn latent_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn discount(&self) -> f64;
    fn cost_discount(&self) -> f64;
    fn next(&self, z: &Matrix, a: &Matrix) -> Result<Matrix>;
    fn reward(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>>;
    /// Maximum over the cost-head ensemble.
    fn cost_max(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>>;
    /// Ensemble-average reward action-value.
    fn value_avg(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>>;
    /// Ensemble-average cost action-value.
    fn cost_value_avg(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>>;
}

/// Batched policy over latents with actions in `[-1, 1]^m`.
pub trait ActionPolicy {
    fn mean_action(&self, z: &Matrix) -> Result<Matrix>;
    fn sample_action(&self, z: &Matrix, rng: &mut dyn RngCore) -> Result<Matrix>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PolicyPrior,
    Sampled,
}

/// An `H`-step action sequence, stored row-major (`actions[t·m + j]`), with
/// its reward estimate `value` (J^M) and cost estimate `cost` (J^M_c).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSequence {
    pub actions: Vec<f64>,
    pub provenance: Provenance,
    pub value: f64,
    pub cost: f64,
}

impl CandidateSequence {
    pub fn new(actions: Vec<f64>, provenance: Provenance) -> Self {
        Self { actions, provenance, value: f64::NAN, cost: f64::NAN }
    }

    pub fn step(&self, t: usize, action_dim: usize) -> &[f64] {
        &self.actions[t * action_dim..(t + 1) * action_dim]
    }
}

/// Ranking used wherever candidates are ordered by reward: higher `value`
/// first, then lower `cost`, then the action vectors in lexicographic
/// `total_cmp` order. The order depends only on candidate contents.
pub fn reward_order(a: &CandidateSequence, b: &CandidateSequence) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then(a.cost.total_cmp(&b.cost))
        .then_with(|| lexicographic(&a.actions, &b.actions))
}

/// Ranking by safety: lower `cost` first, then higher `value`, then actions.
pub fn cost_order(a: &CandidateSequence, b: &CandidateSequence) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then(b.value.total_cmp(&a.value))
        .then_with(|| lexicographic(&a.actions, &b.actions))
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(a.len().cmp(&b.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// Thresholds from the policy prior.
    #[default]
    Adaptive,
    /// Fixed cost limit on the full estimate (immediate costs plus bootstrap).
    CceGlobal,
    /// Fixed cost limit on immediate costs only.
    CceLocal,
    /// Top-k by reward with no cost filtering.
    Unconstrained,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalSelection {
    /// Uniform over the final elite set.
    #[default]
    Uniform,
    /// Softmax of `value / temperature` over the final elite set.
    ScoreWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub iterations: usize,
    /// Gaussian samples per iteration.
    pub samples: usize,
    /// Policy-prior sequences, generated once per call.
    pub prior: usize,
    /// Elite cap `k`.
    pub elites: usize,
    pub sigma_init: f64,
    pub sigma_min: f64,
    /// Set by the run mode, not read from config files.
    #[serde(skip)]
    pub mode: PlanMode,
    /// Cost limit for the CCE modes.
    pub d_plan: f64,
    pub final_selection: FinalSelection,
    pub temperature: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            iterations: 6,
            samples: 512,
            prior: 24,
            elites: 64,
            sigma_init: 1.0,
            sigma_min: 0.05,
            mode: PlanMode::Adaptive,
            d_plan: 1.0,
            final_selection: FinalSelection::Uniform,
            temperature: 0.5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 || self.elites == 0 {
            return Err(Error::config("planner horizon, iterations and elites must all be at least 1"));
        }
        if !(self.sigma_init > 0.0) || !(self.sigma_min > 0.0) {
            return Err(Error::config("planner sigma_init and sigma_min must be positive"));
        }
        if self.samples + self.prior == 0 {
            return Err(Error::config("planner needs at least one sample or prior sequence"));
        }
        if self.mode == PlanMode::Adaptive && self.prior == 0 {
            return Err(Error::config("adaptive planning needs a non-empty policy prior"));
        }
        if matches!(self.mode, PlanMode::CceGlobal | PlanMode::CceLocal) && !(self.d_plan >= 0.0) {
            return Err(Error::config(format!("d_plan must be non-negative, got {}", self.d_plan)));
        }
        if self.final_selection == FinalSelection::ScoreWeighted && !(self.temperature > 0.0) {
            return Err(Error::config("score-weighted selection needs a positive temperature"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    /// First action of the chosen sequence.
    pub action: Vec<f64>,
    pub chosen: CandidateSequence,
    /// Refined sampling mean, `H·m` entries.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `(J^M, J^M_c)` of the refined mean sequence.
    pub mean_estimate: (f64, f64),
    /// `(d^R, d^c)` in adaptive mode.
    pub thresholds: Option<(f64, f64)>,
    pub elite_count: usize,
    /// The final elite set is the policy prior (adaptive) or the lowest-cost
    /// candidates (CCE with nothing feasible).
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EliteSelection {
    pub elites: Vec<CandidateSequence>,
    pub fallback: bool,
}

fn check_z0<M: LatentModel + ?Sized>(z0: &[f64], model: &M) -> Result<()> {
    if z0.len() != model.latent_dim() {
        return Err(Error::config(format!("planner expects a {}-wide latent, got {}", model.latent_dim(), z0.len())));
    }
    Ok(())
}

/// Rolls the stochastic policy through the model `count` times from `z0`.
pub fn generate_policy_prior<M, P>(
    z0: &[f64],
    policy: &P,
    model: &M,
    count: usize,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<CandidateSequence>>
where
    M: LatentModel + ?Sized,
    P: ActionPolicy + ?Sized,
{
    check_z0(z0, model)?;
    let m = model.action_dim();
    let mut actions = vec![Vec::with_capacity(horizon * m); count];
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut z = Matrix::repeat_row(z0, count);
    for _ in 0..horizon {
        let mut a = policy.sample_action(&z, rng)?;
        for v in a.as_mut_slice() {
            *v = v.clamp(-1.0, 1.0);
        }
        for (i, seq) in actions.iter_mut().enumerate() {
            seq.extend_from_slice(a.row(i));
        }
        z = model.next(&z, &a)?;
    }
    Ok(actions.into_iter().map(|a| CandidateSequence::new(a, Provenance::PolicyPrior)).collect())
}

/// Fills `value` and `cost` for every candidate:
/// `J^M = Σ_i γ^i r̂_i + γ^H Q_avg(z_H, π(z_H))` and
/// `J^M_c = Σ_i γ_c^i ĉ_max,i (+ γ_c^H Q^c_avg(z_H, π(z_H)) when `cost_bootstrap`)`,
/// with `π(z_H)` the policy mean.
pub fn estimate_values<M, P>(
    z0: &[f64],
    candidates: &mut [CandidateSequence],
    model: &M,
    policy: &P,
    cost_bootstrap: bool,
) -> Result<()>
where
    M: LatentModel + ?Sized,
    P: ActionPolicy + ?Sized,
{
    check_z0(z0, model)?;
    let n = candidates.len();
    if n == 0 {
        return Ok(());
    }
    let m = model.action_dim();
    let horizon = candidates[0].actions.len() / m;
    if candidates.iter().any(|c| c.actions.len() != horizon * m) || horizon == 0 {
        return Err(Error::config("candidate sequences must share a non-zero horizon"));
    }
    let (gamma, gamma_c) = (model.discount(), model.cost_discount());
    let mut value = vec![0.0; n];
    let mut cost = vec![0.0; n];
    let mut z = Matrix::repeat_row(z0, n);
    let mut a = Matrix::zeros(n, m);
    for t in 0..horizon {
        for (i, c) in candidates.iter().enumerate() {
            a.row_mut(i).copy_from_slice(c.step(t, m));
        }
        let r = model.reward(&z, &a)?;
        let c = model.cost_max(&z, &a)?;
        let (g, gc) = (gamma.powi(t as i32), gamma_c.powi(t as i32));
        for i in 0..n {
            value[i] += g * r[i];
            cost[i] += gc * c[i];
        }
        z = model.next(&z, &a)?;
    }
    let a_h = policy.mean_action(&z)?;
    let q = model.value_avg(&z, &a_h)?;
    let g = gamma.powi(horizon as i32);
    for i in 0..n {
        value[i] += g * q[i];
    }
    if cost_bootstrap {
        let qc = model.cost_value_avg(&z, &a_h)?;
        let gc = gamma_c.powi(horizon as i32);
        for i in 0..n {
            cost[i] += gc * qc[i];
        }
    }
    for (i, c) in candidates.iter_mut().enumerate() {
        c.value = value[i];
        c.cost = cost[i];
    }
    Ok(())
}

/// `(d^R, d^c)`: the mean reward and cost estimates of the prior set.
pub fn set_thresholds(prior: &[CandidateSequence]) -> Result<(f64, f64)> {
    if prior.is_empty() {
        return Err(Error::config("cannot derive thresholds from an empty policy prior"));
    }
    let n = prior.len() as f64;
    Ok((prior.iter().map(|c| c.value).sum::<f64>() / n, prior.iter().map(|c| c.cost).sum::<f64>() / n))
}

/// The `k` best of `items` under `order`, sorted.
fn top_k(mut items: Vec<CandidateSequence>, k: usize, order: fn(&CandidateSequence, &CandidateSequence) -> Ordering) -> Vec<CandidateSequence> {
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, order);
        items.truncate(k);
    }
    items.sort_by(order);
    items
}

/// Safe-improvement elite selection. Candidates with `value ≥ d_r` and
/// `cost ≤ d_c` form the improvement set; if it is empty the prior is returned
/// with the fallback flag, if it has at most `k` members all are returned,
/// otherwise the `k` best under [`reward_order`].
pub fn select_elites(
    candidates: &[CandidateSequence],
    prior: &[CandidateSequence],
    d_r: f64,
    d_c: f64,
    k: usize,
) -> EliteSelection {
    let improving: Vec<CandidateSequence> =
        candidates.iter().filter(|c| c.value >= d_r && c.cost <= d_c).cloned().collect();
    if improving.is_empty() {
        return EliteSelection { elites: prior.to_vec(), fallback: true };
    }
    EliteSelection { elites: top_k(improving, k.max(1), reward_order), fallback: false }
}

/// Fixed-threshold selection: the `k` best feasible (`cost < d_plan`)
/// candidates by reward, or the `k` lowest-cost candidates if none is feasible.
pub fn select_cce(candidates: &[CandidateSequence], d_plan: f64, k: usize) -> EliteSelection {
    let feasible: Vec<CandidateSequence> = candidates.iter().filter(|c| c.cost < d_plan).cloned().collect();
    if feasible.is_empty() {
        return EliteSelection { elites: top_k(candidates.to_vec(), k.max(1), cost_order), fallback: true };
    }
    EliteSelection { elites: top_k(feasible, k.max(1), reward_order), fallback: false }
}

/// Elementwise mean and standard deviation of the elite actions, with the
/// deviation floored at `sigma_min`.
pub fn refit(elites: &[CandidateSequence], sigma_min: f64) -> (Vec<f64>, Vec<f64>) {
    let len = elites[0].actions.len();
    let n = elites.len() as f64;
    let mut mean = vec![0.0; len];
    for e in elites {
        for (m, a) in mean.iter_mut().zip(&e.actions) {
            *m += a;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; len];
    for e in elites {
        for ((s, a), m) in std.iter_mut().zip(&e.actions).zip(&mean) {
            *s += (a - m) * (a - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt().max(sigma_min);
    }
    (mean, std)
}

/// Drops the first action of a sequence mean and appends a zero action.
pub fn shift_mean(mean: &[f64], action_dim: usize) -> Vec<f64> {
    let mut out = mean[action_dim.min(mean.len())..].to_vec();
    out.resize(mean.len(), 0.0);
    out
}

fn sample_gaussian(mean: &[f64], std: &[f64], count: usize, rng: &mut dyn RngCore) -> Vec<CandidateSequence> {
    (0..count)
        .map(|_| {
            let actions = mean
                .iter()
                .zip(std)
                .map(|(&m, &s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    (m + s * e).clamp(-1.0, 1.0)
                })
                .collect();
            CandidateSequence::new(actions, Provenance::Sampled)
        })
        .collect()
}

fn pick_final(elites: &[CandidateSequence], cfg: &PlannerConfig, rng: &mut dyn RngCore) -> usize {
    match cfg.final_selection {
        FinalSelection::Uniform => rng.random_range(0..elites.len()),
        FinalSelection::ScoreWeighted => {
            let max = elites.iter().map(|e| e.value).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = elites.iter().map(|e| ((e.value - max) / cfg.temperature).exp()).collect();
            let total: f64 = w.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, wi) in w.iter().enumerate() {
                acc += wi;
                if u < acc {
                    return i;
                }
            }
            elites.len() - 1
        }
    }
}

/// Runs the planner from latent `z0`. `warm_start` is the previous call's
/// shifted mean (see [`shift_mean`]); `None` starts from zeros.
pub fn plan<M, P>(
    z0: &[f64],
    warm_start: Option<&[f64]>,
    cfg: &PlannerConfig,
    model: &M,
    policy: &P,
    rng: &mut dyn RngCore,
) -> Result<PlanOutcome>
where
    M: LatentModel + ?Sized,
    P: ActionPolicy + ?Sized,
{
    cfg.validate()?;
    check_z0(z0, model)?;
    let m = model.action_dim();
    let len = cfg.horizon * m;
    let mut mean = match warm_start {
        Some(w) if w.len() == len => w.to_vec(),
        Some(w) => {
            return Err(Error::config(format!("warm start has {} entries, expected {len}", w.len())));
        }
        None => vec![0.0; len],
    };
    let mut std = vec![cfg.sigma_init; len];
    let cost_bootstrap = cfg.mode != PlanMode::CceLocal;

    let mut prior = generate_policy_prior(z0, policy, model, cfg.prior, cfg.horizon, rng)?;
    estimate_values(z0, &mut prior, model, policy, cost_bootstrap)?;
    let thresholds = match cfg.mode {
        PlanMode::Adaptive => Some(set_thresholds(&prior)?),
        _ => None,
    };

    let mut selection = EliteSelection { elites: Vec::new(), fallback: false };
    for _ in 0..cfg.iterations {
        let mut candidates = sample_gaussian(&mean, &std, cfg.samples, rng);
        estimate_values(z0, &mut candidates, model, policy, cost_bootstrap)?;
        candidates.extend(prior.iter().cloned());
        selection = match cfg.mode {
            PlanMode::Adaptive => {
                let (d_r, d_c) = thresholds.expect("adaptive mode has thresholds");
                select_elites(&candidates, &prior, d_r, d_c, cfg.elites)
            }
            PlanMode::CceGlobal | PlanMode::CceLocal => select_cce(&candidates, cfg.d_plan, cfg.elites),
            PlanMode::Unconstrained => select_cce(&candidates, f64::INFINITY, cfg.elites),
        };
        if selection.elites.is_empty() {
            return Err(Error::config("planner produced no elites"));
        }
        (mean, std) = refit(&selection.elites, cfg.sigma_min);
    }

    let chosen = selection.elites[pick_final(&selection.elites, cfg, rng)].clone();
    let mut mean_seq = [CandidateSequence::new(mean.iter().map(|v| v.clamp(-1.0, 1.0)).collect(), Provenance::Sampled)];
    estimate_values(z0, &mut mean_seq, model, policy, cost_bootstrap)?;
    Ok(PlanOutcome {
        action: chosen.step(0, m).to_vec(),
        chosen,
        mean,
        std,
        mean_estimate: (mean_seq[0].value, mean_seq[0].cost),
        thresholds,
        elite_count: selection.elites.len(),
        fallback: selection.fallback,
    })
}
