//! Tanh-squashed Gaussian policy over latents and its Augmented Lagrangian
//! training objective.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, AdamConfig, BoundNet, DenseNet, Matrix, NetGrads, Tape, Var};
use crate::planner::ActionPolicy;
use crate::representation::{decode_tape, LatentState};
use crate::world_model::{ValueMode, WorldModel};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// The log standard deviation is squashed into `[log_std_min, log_std_max]`.
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Weight of the reward value term (α).
    pub alpha: f64,
    /// Weight of the entropy bonus (β).
    pub beta: f64,
    /// Safety budget `b` on the policy's expected cost value.
    pub budget: f64,
    /// Penalty growth rate ν.
    pub nu: f64,
    /// Initial penalty μ.
    pub mu_init: f64,
    /// Initial multiplier λ.
    pub lambda_init: f64,
    pub optimizer: AdamConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            hidden_layers: 2,
            log_std_min: -5.0,
            log_std_max: 1.0,
            alpha: 1.0,
            beta: 1e-3,
            budget: 0.1,
            nu: 1e-4,
            mu_init: 1.0,
            lambda_init: 0.0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("policy hidden_dim must be at least 1"));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::config("policy log_std_min must be below log_std_max"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("policy alpha and beta must be non-negative"));
        }
        LagrangianState::new(self.budget, self.nu, self.mu_init, self.lambda_init).map(|_| ())
    }
}

/// Maps a latent to a diagonal Gaussian over pre-squash actions; actions are
/// `tanh` of a sample, so they always lie in `(-1, 1)^m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    net: DenseNet,
    action_dim: usize,
    log_std_min: f64,
    log_std_max: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Batched draws with their log-densities.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, action_dim: usize, cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![latent_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden_dim, cfg.hidden_layers));
        widths.push(2 * action_dim);
        let net = DenseNet::new(&widths, Activation::Mish, Activation::Linear, rng)?;
        Ok(Self {
            net,
            action_dim,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
            alpha: cfg.alpha,
            beta: cfg.beta,
        })
    }

    pub fn from_net(net: DenseNet, log_std_min: f64, log_std_max: f64, alpha: f64, beta: f64) -> Result<Self> {
        if net.output_width() % 2 != 0 {
            return Err(Error::config("policy net output width must be even (mean and log-std)"));
        }
        let action_dim = net.output_width() / 2;
        Ok(Self { net, action_dim, log_std_min, log_std_max, alpha, beta })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_width()
    }

    fn squash_log_std(&self, raw: f64) -> f64 {
        self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (raw.tanh() + 1.0)
    }

    /// Pre-squash means and log standard deviations, one row per latent.
    pub fn distribution(&self, z: &Matrix) -> Result<(Matrix, Matrix)> {
        let out = self.net.forward(z)?;
        let m = self.action_dim;
        let mean = out.slice_cols(0, m);
        let log_std = out.slice_cols(m, m).map(|r| self.squash_log_std(r));
        Ok((mean, log_std))
    }

    /// Draws `tanh(μ + σ·ε)` per row with its change-of-variables log-density;
    /// `deterministic` uses `ε = 0`.
    pub fn sample_batch(&self, z: &Matrix, deterministic: bool, rng: &mut dyn RngCore) -> Result<PolicySample> {
        let (mean, log_std) = self.distribution(z)?;
        let mut actions = Matrix::zeros(z.rows(), self.action_dim);
        let mut log_probs = vec![0.0; z.rows()];
        for i in 0..z.rows() {
            for j in 0..self.action_dim {
                let eps: f64 = if deterministic { 0.0 } else { rng.sample(StandardNormal) };
                let ls = log_std[(i, j)];
                let u = mean[(i, j)] + ls.exp() * eps;
                actions[(i, j)] = u.tanh();
                log_probs[i] += -0.5 * eps * eps - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
            }
        }
        Ok(PolicySample { actions, log_probs })
    }

    pub fn sample_action(&self, z: &LatentState, deterministic: bool, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        let s = self.sample_batch(&z.to_row(), deterministic, rng)?;
        Ok((s.actions.into_vec(), s.log_probs[0]))
    }

    /// Log-density of an action in `(-1, 1)^m`.
    pub fn log_prob(&self, z: &LatentState, action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim {
            return Err(Error::config(format!("expected a {}-D action, got {}", self.action_dim, action.len())));
        }
        if action.iter().any(|a| !(a.abs() < 1.0)) {
            return Err(Error::config("log_prob needs actions strictly inside (-1, 1)"));
        }
        let (mean, log_std) = self.distribution(&z.to_row())?;
        Ok(action
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let u = a.atanh();
                let ls = log_std[(0, j)];
                let e = (u - mean[(0, j)]) / ls.exp();
                -0.5 * e * e - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u)
            })
            .sum())
    }

    /// Reparameterized draw on a tape: returns the action (`rows x m`), the
    /// log-density column (`rows x 1`) and the squashed mean action.
    /// `eps` holds the standard-normal noise.
    pub(crate) fn rsample_tape(&self, tape: &mut Tape, bound: &BoundNet, z: Var, eps: &Matrix) -> Result<(Var, Var, Var)> {
        let m = self.action_dim;
        let out = bound.forward(tape, z)?;
        let mean = tape.slice_cols(out, 0, m);
        let raw = tape.slice_cols(out, m, m);
        let t = tape.activation(raw, Activation::Tanh);
        let t = tape.offset(t, 1.0);
        let t = tape.scale(t, 0.5 * (self.log_std_max - self.log_std_min));
        let log_std = tape.offset(t, self.log_std_min);
        let std = tape.exp(log_std);
        let noise = tape.constant(eps.clone());
        let spread = tape.mul(std, noise);
        let u = tape.add(mean, spread);
        let action = tape.activation(u, Activation::Tanh);
        let base = tape.constant(eps.map(|e| -0.5 * e * e - HALF_LN_2PI));
        let lp = tape.sub(base, log_std);
        let jac = tape.log_one_minus_tanh_sq(u);
        let lp = tape.sub(lp, jac);
        let mean_action = tape.activation(mean, Activation::Tanh);
        Ok((action, tape.sum_cols(lp), mean_action))
    }
}

fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

impl ActionPolicy for PolicyNet {
    fn mean_action(&self, z: &Matrix) -> Result<Matrix> {
        let (mean, _) = self.distribution(z)?;
        Ok(mean.map(f64::tanh))
    }

    fn sample_action(&self, z: &Matrix, rng: &mut dyn RngCore) -> Result<Matrix> {
        Ok(self.sample_batch(z, false, rng)?.actions)
    }
}

/// Augmented Lagrangian bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    /// Multiplier λ, never negative.
    pub lambda: f64,
    /// Penalty μ.
    pub mu: f64,
    /// Growth rate ν.
    pub nu: f64,
    /// Budget `b`.
    pub budget: f64,
    /// Number of penalty updates so far.
    pub k: u64,
}

impl LagrangianState {
    pub fn new(budget: f64, nu: f64, mu: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(mu > 0.0) || !(nu >= 0.0) || !budget.is_finite() {
            return Err(Error::config(format!(
                "invalid Lagrangian state: lambda {lambda} (>= 0), mu {mu} (> 0), nu {nu} (>= 0), budget {budget}"
            )));
        }
        Ok(Self { lambda, mu, nu, budget, k: 0 })
    }

    /// Applies the multiplier and penalty updates for constraint violation `delta`.
    pub fn advance(&mut self, delta: f64) {
        let (_, lambda) = psi_and_multiplier(delta, self);
        self.lambda = lambda;
        *self = penalty_update(self);
    }
}

/// The penalty term Ψ and the next multiplier:
/// if `λ + μΔ ≥ 0`, `Ψ = λΔ + μΔ²/2` and `λ' = λ + μΔ`; otherwise
/// `Ψ = −λ²/(2μ)` and `λ' = 0`.
pub fn psi_and_multiplier(delta: f64, state: &LagrangianState) -> (f64, f64) {
    let (lambda, mu) = (state.lambda, state.mu);
    if lambda + mu * delta >= 0.0 {
        (lambda * delta + 0.5 * mu * delta * delta, lambda + mu * delta)
    } else {
        (-lambda * lambda / (2.0 * mu), 0.0)
    }
}

/// `μ ← max(μ(ν + 1), 1)` and `k ← k + 1`.
pub fn penalty_update(state: &LagrangianState) -> LagrangianState {
    LagrangianState { mu: (state.mu * (state.nu + 1.0)).max(1.0), k: state.k + 1, ..*state }
}

/// `Δ` from precomputed cost values: their mean minus the budget.
pub fn delta_from_costs(cost_values: &[f64], budget: f64) -> f64 {
    cost_values.iter().sum::<f64>() / cost_values.len() as f64 - budget
}

/// `Δ = mean_z Q^c_avg(z, π_mean(z)) − b` over every row of every latent batch.
pub fn delta(latents: &[Matrix], policy: &PolicyNet, model: &WorldModel, budget: f64) -> Result<f64> {
    let mut costs = Vec::new();
    for z in latents {
        let a = policy.mean_action(z)?;
        costs.extend(crate::planner::LatentModel::cost_value_avg(model, z, &a)?);
    }
    if costs.is_empty() {
        return Err(Error::config("delta needs at least one latent"));
    }
    Ok(delta_from_costs(&costs, budget))
}

/// Scalar parts of one policy objective evaluation.
#[derive(Clone, Debug)]
pub struct PolicyLoss {
    pub total: f64,
    /// `Σ_t λ^t · (−α · mean Q)`.
    pub value_term: f64,
    /// `Σ_t λ^t · β · mean log π`.
    pub entropy_term: f64,
    pub psi: f64,
    pub delta: f64,
    /// λ after this batch's multiplier update.
    pub next_lambda: f64,
    pub grads: NetGrads,
}

/// Policy objective over detached rollout latents `ẑ_0..ẑ_H`:
/// `Σ_t λ^t (−α Q(ẑ_t, a_t) + β log π(a_t|ẑ_t)) + Ψ(Δ)` with `a_t` a
/// reparameterized sample, `Q` reduced from the value ensemble by the model's
/// `policy_value` mode and `Δ` taken at the policy mean action. Model parameters
/// are constants; gradients reach only the policy. `penalty = false` drops Ψ.
pub fn policy_loss(
    latents: &[Matrix],
    policy: &PolicyNet,
    model: &WorldModel,
    state: &LagrangianState,
    penalty: bool,
    rng: &mut dyn RngCore,
) -> Result<PolicyLoss> {
    if latents.is_empty() {
        return Err(Error::config("policy loss needs at least one latent batch"));
    }
    let cfg = model.config();
    let bins = &cfg.bins;
    let mut tape = Tape::new();
    let bound = policy.net.bind(&mut tape);
    let q_heads: Vec<BoundNet> = model.q_heads().iter().map(|n| n.bind_frozen(&mut tape)).collect();
    let qc_heads: Vec<BoundNet> = model.cost_value_heads().iter().map(|n| n.bind_frozen(&mut tape)).collect();
    let picks = match cfg.policy_value {
        ValueMode::MinSubsample => model.subsample_q(rng)?,
        ValueMode::Avg => (0..q_heads.len()).collect(),
    };

    let mut terms: Vec<(Var, f64)> = Vec::new();
    let (mut value_term, mut entropy_term) = (0.0, 0.0);
    let mut cost_sum: Option<Var> = None;
    let mut rows = 0usize;
    for (t, zm) in latents.iter().enumerate() {
        let w = cfg.rollout_weight.powi(t as i32);
        let z = tape.constant(zm.clone());
        let eps = Matrix::from_vec(zm.rows(), policy.action_dim, (0..zm.rows() * policy.action_dim).map(|_| rng.sample(StandardNormal)).collect());
        let (a, logp, a_mean) = policy.rsample_tape(&mut tape, &bound, z, &eps)?;
        let za = tape.concat_cols(&[z, a]);
        let mut q: Option<Var> = None;
        for &j in &picks {
            let logits = q_heads[j].forward(&mut tape, za)?;
            let v = decode_tape(&mut tape, logits, bins);
            q = Some(match (q, cfg.policy_value) {
                (None, _) => v,
                (Some(prev), ValueMode::MinSubsample) => tape.min(prev, v),
                (Some(prev), ValueMode::Avg) => tape.add(prev, v),
            });
        }
        let q = q.expect("at least one value head");
        let q_mean = tape.mean(q);
        let q_mean = match cfg.policy_value {
            ValueMode::MinSubsample => q_mean,
            ValueMode::Avg => tape.scale(q_mean, 1.0 / picks.len() as f64),
        };
        let lp_mean = tape.mean(logp);
        value_term += -w * policy.alpha * tape.value(q_mean).item();
        entropy_term += w * policy.beta * tape.value(lp_mean).item();
        terms.push((q_mean, -w * policy.alpha));
        terms.push((lp_mean, w * policy.beta));

        if penalty {
            let za_mean = tape.concat_cols(&[z, a_mean]);
            for head in &qc_heads {
                let logits = head.forward(&mut tape, za_mean)?;
                let v = decode_tape(&mut tape, logits, bins);
                let s = tape.sum_cols(v);
                let total = sum_rows(&mut tape, s);
                cost_sum = Some(match cost_sum {
                    None => total,
                    Some(prev) => tape.add(prev, total),
                });
            }
            rows += zm.rows();
        }
    }

    let mut psi_value = 0.0;
    let mut delta_value = 0.0;
    let mut next_lambda = state.lambda;
    if penalty {
        let n = (rows * qc_heads.len()) as f64;
        let mean_cost = tape.scale(cost_sum.expect("penalty terms"), 1.0 / n);
        let delta = tape.offset(mean_cost, -state.budget);
        delta_value = tape.value(delta).item();
        let (psi, lam) = psi_and_multiplier(delta_value, state);
        psi_value = psi;
        next_lambda = lam;
        if state.lambda + state.mu * delta_value >= 0.0 {
            let sq = tape.square(delta);
            terms.push((delta, state.lambda));
            terms.push((sq, 0.5 * state.mu));
        }
    }
    let root = weighted_sum(&mut tape, &terms);
    let total = tape.value(root).item() + if penalty && state.lambda + state.mu * delta_value < 0.0 { psi_value } else { 0.0 };
    if !total.is_finite() {
        return Err(Error::training(format!(
            "non-finite policy loss (value {value_term}, entropy {entropy_term}, psi {psi_value}, delta {delta_value})"
        )));
    }
    let g = tape.backward(root)?;
    Ok(PolicyLoss {
        total,
        value_term,
        entropy_term,
        psi: psi_value,
        delta: delta_value,
        next_lambda,
        grads: bound.grads(&tape, &g),
    })
}

/// Sum of a `rows x 1` column as a `1 x 1` scalar.
fn sum_rows(tape: &mut Tape, col: Var) -> Var {
    let n = tape.value(col).rows() as f64;
    let m = tape.mean(col);
    tape.scale(m, n)
}

/// `Σ w_i · v_i` over `1 x 1` variables.
pub(crate) fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = tape.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s),
        });
    }
    acc.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_policy(latent: usize, action: usize, seed: u64) -> PolicyNet {
        let cfg = PolicyConfig { hidden_dim: 8, ..Default::default() };
        PolicyNet::new(latent, action, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn deterministic_zero_mean_gives_zero_action() {
        let mut p = tiny_policy(4, 2, 0);
        p.net_mut().zero_output_layer();
        let z = LatentState::from_normalized(vec![0.25; 4]);
        let (a, _) = p.sample_action(&z, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn samples_stay_in_bounds() {
        let p = tiny_policy(4, 2, 1);
        let z = Matrix::repeat_row(&[0.1, 0.2, 0.3, 0.4], 100_000);
        let s = p.sample_batch(&z, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.actions.as_slice().iter().all(|a| a.abs() <= 1.0));
        assert!(s.log_probs.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn lagrangian_hand_cases() {
        let s = |lambda, mu| LagrangianState { lambda, mu, nu: 0.0, budget: 0.1, k: 0 };
        assert_eq!(psi_and_multiplier(0.5, &s(0.0, 1.0)), (0.125, 0.5));
        assert_eq!(psi_and_multiplier(-2.0, &s(1.0, 1.0)), (-0.5, 0.0));
        assert_eq!(psi_and_multiplier(0.0, &s(0.7, 3.0)), (0.0, 0.7));
        let up = penalty_update(&LagrangianState { nu: 0.5, ..s(0.0, 1.0) });
        assert_eq!((up.mu, up.k), (1.5, 1));
        assert_eq!(penalty_update(&s(0.0, 0.1)).mu, 1.0);
    }

    #[test]
    fn penalty_strictly_increases_with_positive_growth() {
        let mut st = LagrangianState::new(0.1, 1e-3, 1.0, 0.0).unwrap();
        for _ in 0..100 {
            let next = penalty_update(&st);
            assert!(next.mu > st.mu);
            st = next;
        }
    }

    #[test]
    fn delta_hand_cases() {
        assert_eq!(delta_from_costs(&[0.1, 0.1], 0.1), 0.0);
        assert!((delta_from_costs(&[0.2, 0.4], 0.1) - 0.2).abs() < 1e-15);
        assert_eq!(delta_from_costs(&[0.0; 5], 0.1), -0.1);
    }
}
