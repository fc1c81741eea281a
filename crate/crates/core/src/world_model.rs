//! Implicit world model: encoder, latent dynamics, reward head, and ensembles
//! of value, cost and cost-value heads with EMA target copies.
//!
//! All scalar heads are two-hot classifiers over symlog bins. The model is
//! trained only on quantities that matter for values: latent consistency,
//! reward, cost and the two TD targets. An optional observation decoder exists
//! for ablations.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Adam, AdamConfig, BoundNet, DenseNet, Matrix, Tape, Var};
use crate::planner::LatentModel;
use crate::representation::{decode_logits_batch, discrete_ce_tape, BinSpec, LatentState, SimNormSpec};
use crate::safe_policy::{weighted_sum, PolicyNet};

/// How the reward value ensemble is reduced to one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    /// Minimum over `q_subsample` heads drawn without replacement.
    #[default]
    MinSubsample,
    /// Mean over all heads.
    Avg,
}

/// How the target cost-value ensemble is reduced inside cost TD targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostAggregation {
    Min,
    Max,
    #[default]
    Avg,
}

impl CostAggregation {
    pub fn apply(self, heads: &[f64]) -> f64 {
        match self {
            CostAggregation::Min => heads.iter().copied().fold(f64::INFINITY, f64::min),
            CostAggregation::Max => heads.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            CostAggregation::Avg => heads.iter().sum::<f64>() / heads.len() as f64,
        }
    }
}

/// Observation reconstruction head used only in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub enabled: bool,
    pub weight: f64,
    /// Drop the latent consistency term while the decoder is on.
    pub no_consistency: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { enabled: false, weight: 0.1, no_consistency: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    pub latent_dim: usize,
    pub simnorm_group: usize,
    pub hidden_dim: usize,
    /// Hidden layers in every network.
    pub hidden_layers: usize,
    pub num_q: usize,
    /// Heads drawn for [`ValueMode::MinSubsample`].
    pub q_subsample: usize,
    pub num_cost: usize,
    pub num_cost_value: usize,
    pub bins: BinSpec,
    pub gamma: f64,
    pub gamma_c: f64,
    /// Per-step weight λ of the rollout losses.
    pub rollout_weight: f64,
    /// Training rollout horizon; segments have `horizon + 1` transitions.
    pub horizon: usize,
    /// EMA rate of the target value networks.
    pub tau: f64,
    /// Reduction of the target value ensemble in reward TD targets.
    pub reward_target: ValueMode,
    /// Reduction of the target cost-value ensemble in cost TD targets.
    pub cost_target: CostAggregation,
    /// Reduction of the value ensemble in the policy objective.
    pub policy_value: ValueMode,
    pub consistency_coef: f64,
    pub reward_coef: f64,
    pub value_coef: f64,
    pub cost_coef: f64,
    pub cost_value_coef: f64,
    pub decoder: DecoderConfig,
    pub optimizer: AdamConfig,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            simnorm_group: 8,
            hidden_dim: 128,
            hidden_layers: 2,
            num_q: 5,
            q_subsample: 2,
            num_cost: 5,
            num_cost_value: 5,
            bins: BinSpec::default(),
            gamma: 0.99,
            gamma_c: 0.99,
            rollout_weight: 0.5,
            horizon: 3,
            tau: 0.01,
            reward_target: ValueMode::MinSubsample,
            cost_target: CostAggregation::Avg,
            policy_value: ValueMode::MinSubsample,
            consistency_coef: 1.0,
            reward_coef: 1.0,
            value_coef: 1.0,
            cost_coef: 1.0,
            cost_value_coef: 1.0,
            decoder: DecoderConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl WorldModelConfig {
    pub fn simnorm(&self) -> SimNormSpec {
        SimNormSpec { width: self.latent_dim, group: self.simnorm_group }
    }

    pub fn validate(&self) -> Result<()> {
        self.simnorm().validate()?;
        self.bins.validate()?;
        if self.hidden_dim == 0 {
            return Err(Error::config("world_model.hidden_dim must be at least 1"));
        }
        if self.num_q == 0 || self.num_cost == 0 || self.num_cost_value == 0 {
            return Err(Error::config("every ensemble needs at least one head"));
        }
        let uses_min = self.reward_target == ValueMode::MinSubsample || self.policy_value == ValueMode::MinSubsample;
        if uses_min && (self.num_q < 2 || self.q_subsample == 0 || self.q_subsample > self.num_q) {
            return Err(Error::config(format!(
                "min-subsample needs num_q >= 2 and 1 <= q_subsample <= num_q, got num_q {} and q_subsample {}",
                self.num_q, self.q_subsample
            )));
        }
        for (name, g) in [("gamma", self.gamma), ("gamma_c", self.gamma_c)] {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::config(format!("world_model.{name} must lie in [0, 1), got {g}")));
            }
        }
        if !(self.rollout_weight > 0.0 && self.rollout_weight <= 1.0) {
            return Err(Error::config(format!("world_model.rollout_weight must lie in (0, 1], got {}", self.rollout_weight)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("world_model.tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    fn consistency_weight(&self) -> f64 {
        if self.decoder.enabled && self.decoder.no_consistency {
            0.0
        } else {
            self.consistency_coef
        }
    }
}

/// `horizon + 1` consecutive transitions from one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub next_observations: Vec<Vec<f64>>,
    /// Terminal flags; a terminal transition does not bootstrap.
    pub terminated: Vec<bool>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0
            || self.observations.len() != n
            || self.actions.len() != n
            || self.costs.len() != n
            || self.next_observations.len() != n
            || self.terminated.len() != n
        {
            return Err(Error::config("segment sequences must share one non-zero length"));
        }
        if self.costs.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::config("segment costs must be non-negative"));
        }
        Ok(())
    }
}

/// Segments stacked per time step: `obs[t]` is `batch x obs_dim`, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub obs: Vec<Matrix>,
    pub actions: Vec<Matrix>,
    pub rewards: Vec<Vec<f64>>,
    pub costs: Vec<Vec<f64>>,
    pub next_obs: Vec<Matrix>,
    pub terminated: Vec<Vec<bool>>,
}

impl SegmentBatch {
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let first = segments.first().ok_or_else(|| Error::config("empty segment batch"))?;
        for s in segments {
            s.validate()?;
            if s.len() != first.len() {
                return Err(Error::config("segments in a batch must share a length"));
            }
        }
        let stack = |f: &dyn Fn(&Segment) -> &Vec<Vec<f64>>, t: usize| -> Result<Matrix> {
            let rows: Vec<&[f64]> = segments.iter().map(|s| f(s)[t].as_slice()).collect();
            let w = rows[0].len();
            if rows.iter().any(|r| r.len() != w) {
                return Err(Error::config("segment rows must share a width"));
            }
            Ok(Matrix::from_rows(&rows))
        };
        let steps = first.len();
        let mut batch = SegmentBatch {
            obs: Vec::with_capacity(steps),
            actions: Vec::with_capacity(steps),
            rewards: Vec::with_capacity(steps),
            costs: Vec::with_capacity(steps),
            next_obs: Vec::with_capacity(steps),
            terminated: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            batch.obs.push(stack(&|s| &s.observations, t)?);
            batch.actions.push(stack(&|s| &s.actions, t)?);
            batch.next_obs.push(stack(&|s| &s.next_observations, t)?);
            batch.rewards.push(segments.iter().map(|s| s.rewards[t]).collect());
            batch.costs.push(segments.iter().map(|s| s.costs[t]).collect());
            batch.terminated.push(segments.iter().map(|s| s.terminated[t]).collect());
        }
        Ok(batch)
    }

    pub fn steps(&self) -> usize {
        self.obs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.obs.first().map_or(0, Matrix::rows)
    }
}

/// Gradient-free regression targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TdTargets {
    /// `h(s'_t)`, the consistency targets.
    pub next_latents: Vec<Matrix>,
    /// Reward value targets per step and row.
    pub q: Vec<Vec<f64>>,
    /// Cost value targets per step and row.
    pub qc: Vec<Vec<f64>>,
}

/// Scalar parts of one model-loss evaluation, each already summed over steps
/// with the rollout weights but before the per-term coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelLossParts {
    pub total: f64,
    pub consistency: f64,
    pub reward: f64,
    pub value: f64,
    pub cost: f64,
    pub cost_value: f64,
    pub decoder: f64,
}

#[derive(Clone, Debug)]
pub struct ModelLoss {
    pub parts: ModelLossParts,
    /// Gradients in [`WorldModel::online_params`] order.
    pub grads: Vec<Matrix>,
    /// Rollout latents `ẑ_0..ẑ_H`, detached.
    pub latents: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    config: WorldModelConfig,
    obs_dim: usize,
    action_dim: usize,
    encoder: DenseNet,
    dynamics: DenseNet,
    reward: DenseNet,
    q: Vec<DenseNet>,
    cost: Vec<DenseNet>,
    cost_value: Vec<DenseNet>,
    q_target: Vec<DenseNet>,
    cost_value_target: Vec<DenseNet>,
    decoder: Option<DenseNet>,
    optimizer: Adam,
}

struct Bound {
    encoder: BoundNet,
    dynamics: BoundNet,
    reward: BoundNet,
    q: Vec<BoundNet>,
    cost: Vec<BoundNet>,
    cost_value: Vec<BoundNet>,
    decoder: Option<BoundNet>,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(config: WorldModelConfig, obs_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || action_dim == 0 {
            return Err(Error::config("observation and action widths must be positive"));
        }
        let hidden = vec![config.hidden_dim; config.hidden_layers];
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend(&hidden);
            w.push(output);
            w
        };
        let simnorm = Activation::SoftmaxGroup { group: config.simnorm_group };
        let za = config.latent_dim + action_dim;
        let encoder = DenseNet::new(&widths(obs_dim, config.latent_dim), Activation::Mish, simnorm, rng)?;
        let dynamics = DenseNet::new(&widths(za, config.latent_dim), Activation::Mish, simnorm, rng)?;
        let head = |rng: &mut R| -> Result<DenseNet> {
            let mut net = DenseNet::new(&widths(za, config.bins.count), Activation::Mish, Activation::Linear, rng)?;
            net.zero_output_layer();
            Ok(net)
        };
        let reward = head(rng)?;
        let q = (0..config.num_q).map(|_| head(rng)).collect::<Result<Vec<_>>>()?;
        let cost = (0..config.num_cost).map(|_| head(rng)).collect::<Result<Vec<_>>>()?;
        let cost_value = (0..config.num_cost_value).map(|_| head(rng)).collect::<Result<Vec<_>>>()?;
        let decoder = if config.decoder.enabled {
            Some(DenseNet::new(&widths(config.latent_dim, obs_dim), Activation::Mish, Activation::Linear, rng)?)
        } else {
            None
        };
        let mut model = Self {
            q_target: q.clone(),
            cost_value_target: cost_value.clone(),
            config,
            obs_dim,
            action_dim,
            encoder,
            dynamics,
            reward,
            q,
            cost,
            cost_value,
            decoder,
            optimizer: Adam::new(&[], AdamConfig::default()),
        };
        model.optimizer = Adam::new(&model.param_shapes(), model.config.optimizer);
        Ok(model)
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn q_heads(&self) -> &[DenseNet] {
        &self.q
    }

    pub fn cost_heads(&self) -> &[DenseNet] {
        &self.cost
    }

    pub fn cost_value_heads(&self) -> &[DenseNet] {
        &self.cost_value
    }

    pub fn q_target_heads(&self) -> &[DenseNet] {
        &self.q_target
    }

    pub fn cost_value_target_heads(&self) -> &[DenseNet] {
        &self.cost_value_target
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.steps()
    }

    /// Networks trained by [`WorldModel::model_loss`], in gradient order.
    pub fn online_nets(&self) -> Vec<&DenseNet> {
        let mut v = vec![&self.encoder, &self.dynamics, &self.reward];
        v.extend(&self.q);
        v.extend(&self.cost);
        v.extend(&self.cost_value);
        v.extend(&self.decoder);
        v
    }

    pub fn online_nets_mut(&mut self) -> Vec<&mut DenseNet> {
        let mut v = vec![&mut self.encoder, &mut self.dynamics, &mut self.reward];
        v.extend(&mut self.q);
        v.extend(&mut self.cost);
        v.extend(&mut self.cost_value);
        v.extend(&mut self.decoder);
        v
    }

    /// Every online parameter tensor, in gradient order.
    pub fn online_params(&self) -> Vec<&Matrix> {
        self.online_nets().into_iter().flat_map(DenseNet::params).collect()
    }

    pub fn online_params_mut(&mut self) -> Vec<&mut Matrix> {
        self.online_nets_mut().into_iter().flat_map(DenseNet::params_mut).collect()
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.online_nets().into_iter().flat_map(DenseNet::param_shapes).collect()
    }

    /// Mutable access to the target ensembles, for constructing synthetic critics.
    pub fn target_heads_mut(&mut self) -> (&mut [DenseNet], &mut [DenseNet]) {
        (&mut self.q_target, &mut self.cost_value_target)
    }

    /// Mutable access to the online value, cost and cost-value ensembles.
    pub fn heads_mut(&mut self) -> (&mut DenseNet, &mut [DenseNet], &mut [DenseNet], &mut [DenseNet]) {
        (&mut self.reward, &mut self.q, &mut self.cost, &mut self.cost_value)
    }

    pub fn is_finite(&self) -> bool {
        self.online_nets().iter().all(|n| n.is_finite())
            && self.q_target.iter().chain(&self.cost_value_target).all(DenseNet::is_finite)
    }

    fn check_obs(&self, obs: &Matrix) -> Result<()> {
        if obs.cols() != self.obs_dim {
            return Err(Error::config(format!("world model expects {}-wide observations, got {}", self.obs_dim, obs.cols())));
        }
        Ok(())
    }

    fn za(&self, z: &Matrix, a: &Matrix) -> Result<Matrix> {
        if z.cols() != self.config.latent_dim || a.cols() != self.action_dim || z.rows() != a.rows() {
            return Err(Error::config(format!(
                "expected ({}-wide latents, {}-wide actions) with equal rows, got {:?} and {:?}",
                self.config.latent_dim,
                self.action_dim,
                z.shape(),
                a.shape()
            )));
        }
        Ok(Matrix::concat_cols(&[z, a]))
    }

    /// `h(s)` for a batch of observations.
    pub fn encode_batch(&self, obs: &Matrix) -> Result<Matrix> {
        self.check_obs(obs)?;
        self.encoder.forward(obs)
    }

    pub fn encode(&self, obs: &[f64]) -> Result<LatentState> {
        let z = self.encode_batch(&Matrix::row_vector(obs))?;
        Ok(LatentState::from_normalized(z.into_vec()))
    }

    pub fn predict_next(&self, z: &LatentState, a: &[f64]) -> Result<LatentState> {
        let next = self.next(&z.to_row(), &Matrix::row_vector(a))?;
        Ok(LatentState::from_normalized(next.into_vec()))
    }

    pub fn predict_reward(&self, z: &LatentState, a: &[f64]) -> Result<f64> {
        Ok(self.reward(&z.to_row(), &Matrix::row_vector(a))?[0])
    }

    pub fn predict_cost_heads(&self, z: &LatentState, a: &[f64]) -> Result<Vec<f64>> {
        let za = self.za(&z.to_row(), &Matrix::row_vector(a))?;
        self.cost.iter().map(|n| Ok(decode_logits_batch(&n.forward(&za)?, &self.config.bins)[0])).collect()
    }

    /// Decoded outputs of every head in `nets`, as `[head][row]`.
    fn heads(&self, nets: &[DenseNet], za: &Matrix) -> Result<Vec<Vec<f64>>> {
        nets.iter().map(|n| Ok(decode_logits_batch(&n.forward(za)?, &self.config.bins))).collect()
    }

    /// Indices of the value heads used by one min-subsample reduction.
    pub fn subsample_q(&self, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let (n, k) = (self.config.num_q, self.config.q_subsample);
        if n < 2 || k == 0 || k > n {
            return Err(Error::config(format!("cannot draw {k} of {n} value heads")));
        }
        let mut idx = sample_indices(rng, n, k).into_vec();
        idx.sort_unstable();
        Ok(idx)
    }

    fn reduce_values(&self, heads: &[Vec<f64>], mode: ValueMode, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let rows = heads[0].len();
        Ok(match mode {
            ValueMode::Avg => (0..rows).map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / heads.len() as f64).collect(),
            ValueMode::MinSubsample => {
                let picks = self.subsample_q(rng)?;
                (0..rows).map(|i| picks.iter().map(|&j| heads[j][i]).fold(f64::INFINITY, f64::min)).collect()
            }
        })
    }

    /// Reward action-value under `mode`.
    pub fn value_reward(&self, z: &LatentState, a: &[f64], mode: ValueMode, rng: &mut dyn RngCore) -> Result<f64> {
        let za = self.za(&z.to_row(), &Matrix::row_vector(a))?;
        let heads = self.heads(&self.q, &za)?;
        Ok(self.reduce_values(&heads, mode, rng)?[0])
    }

    /// Cost action-value: mean over the cost-value ensemble.
    pub fn value_cost(&self, z: &LatentState, a: &[f64]) -> Result<f64> {
        Ok(self.cost_value_avg(&z.to_row(), &Matrix::row_vector(a))?[0])
    }

    /// Regression targets for `batch`:
    /// `Q_t = r_t + γ(1 − done_t)·Q̄(h(s'_t), a')` and
    /// `Q^c_t = c_t + γ_c(1 − done_t)·Q̄^c(h(s'_t), a')` with `a' ∼ π(h(s'_t))`,
    /// evaluated on the EMA target ensembles.
    pub fn td_targets(&self, batch: &SegmentBatch, policy: &PolicyNet, rng: &mut dyn RngCore) -> Result<TdTargets> {
        let mut out = TdTargets { next_latents: Vec::new(), q: Vec::new(), qc: Vec::new() };
        for t in 0..batch.steps() {
            let z = self.encode_batch(&batch.next_obs[t])?;
            let a = policy.sample_batch(&z, false, rng)?.actions;
            let za = self.za(&z, &a)?;
            let q_heads = self.heads(&self.q_target, &za)?;
            let q = self.reduce_values(&q_heads, self.config.reward_target, rng)?;
            let qc_heads = self.heads(&self.cost_value_target, &za)?;
            let rows = z.rows();
            let mut qt = Vec::with_capacity(rows);
            let mut qct = Vec::with_capacity(rows);
            for i in 0..rows {
                let cont = if batch.terminated[t][i] { 0.0 } else { 1.0 };
                let qc_i: Vec<f64> = qc_heads.iter().map(|h| h[i]).collect();
                qt.push(batch.rewards[t][i] + self.config.gamma * cont * q[i]);
                qct.push(batch.costs[t][i] + self.config.gamma_c * cont * self.config.cost_target.apply(&qc_i));
            }
            out.next_latents.push(z);
            out.q.push(qt);
            out.qc.push(qct);
        }
        Ok(out)
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            encoder: self.encoder.bind(tape),
            dynamics: self.dynamics.bind(tape),
            reward: self.reward.bind(tape),
            q: self.q.iter().map(|n| n.bind(tape)).collect(),
            cost: self.cost.iter().map(|n| n.bind(tape)).collect(),
            cost_value: self.cost_value.iter().map(|n| n.bind(tape)).collect(),
            decoder: self.decoder.as_ref().map(|n| n.bind(tape)),
        }
    }

    /// `Σ_t λ^t L_t` over the batch with fixed `targets`, where `L_t` is the
    /// coefficient-weighted sum of the consistency error
    /// `‖f(ẑ_t, a_t) − h(s'_t)‖²`, the reward CE, and the mean CE of each
    /// ensemble against its target (plus the decoder error when enabled).
    /// The rollout starts at `ẑ_0 = h(s_0)` and follows the dynamics.
    pub fn model_loss(&self, batch: &SegmentBatch, targets: &TdTargets) -> Result<ModelLoss> {
        let steps = self.config.horizon + 1;
        if batch.steps() != steps || targets.q.len() != steps {
            return Err(Error::config(format!(
                "model loss needs {steps}-step segments and targets, got {} and {}",
                batch.steps(),
                targets.q.len()
            )));
        }
        let cfg = &self.config;
        let bins = &cfg.bins;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let s0 = tape.constant(batch.obs[0].clone());
        self.check_obs(&batch.obs[0])?;
        let mut z = b.encoder.forward(&mut tape, s0)?;
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut parts = ModelLossParts::default();
        let mut latents = Vec::with_capacity(steps);

        let mean_ce = |tape: &mut Tape, heads: &[BoundNet], za: Var, y: &[f64]| -> Result<Var> {
            let mut acc: Option<Var> = None;
            for h in heads {
                let logits = h.forward(tape, za)?;
                let ce = discrete_ce_tape(tape, logits, y, bins);
                let m = tape.mean(ce);
                acc = Some(match acc {
                    None => m,
                    Some(prev) => tape.add(prev, m),
                });
            }
            Ok(tape.scale(acc.expect("non-empty ensemble"), 1.0 / heads.len() as f64))
        };

        for t in 0..steps {
            let w = cfg.rollout_weight.powi(t as i32);
            latents.push(tape.value(z).clone());
            let a = tape.constant(batch.actions[t].clone());
            let za = tape.concat_cols(&[z, a]);

            let r_logits = b.reward.forward(&mut tape, za)?;
            let r_ce = discrete_ce_tape(&mut tape, r_logits, &batch.rewards[t], bins);
            let l_r = tape.mean(r_ce);
            let l_v = mean_ce(&mut tape, &b.q, za, &targets.q[t])?;
            let l_c = mean_ce(&mut tape, &b.cost, za, &batch.costs[t])?;
            let l_cv = mean_ce(&mut tape, &b.cost_value, za, &targets.qc[t])?;

            let next = b.dynamics.forward(&mut tape, za)?;
            let target = tape.constant(targets.next_latents[t].clone());
            let diff = tape.sub(next, target);
            let sq = tape.square(diff);
            let per_row = tape.sum_cols(sq);
            let l_cons = tape.mean(per_row);

            if let Some(dec) = &b.decoder {
                let recon = dec.forward(&mut tape, z)?;
                let obs = tape.constant(batch.obs[t].clone());
                let d = tape.sub(recon, obs);
                let d2 = tape.square(d);
                let l_dec = tape.mean(d2);
                parts.decoder += w * tape.value(l_dec).item();
                terms.push((l_dec, w * cfg.decoder.weight));
            }

            parts.consistency += w * tape.value(l_cons).item();
            parts.reward += w * tape.value(l_r).item();
            parts.value += w * tape.value(l_v).item();
            parts.cost += w * tape.value(l_c).item();
            parts.cost_value += w * tape.value(l_cv).item();
            terms.extend([
                (l_cons, w * cfg.consistency_weight()),
                (l_r, w * cfg.reward_coef),
                (l_v, w * cfg.value_coef),
                (l_c, w * cfg.cost_coef),
                (l_cv, w * cfg.cost_value_coef),
            ]);
            z = next;
        }
        let root = weighted_sum(&mut tape, &terms);
        parts.total = tape.value(root).item();
        if !parts.total.is_finite() {
            return Err(Error::training(format!("non-finite model loss: {parts:?}")));
        }
        let g = tape.backward(root)?;
        let mut grads = Vec::new();
        grads.extend(b.encoder.grads(&tape, &g));
        grads.extend(b.dynamics.grads(&tape, &g));
        grads.extend(b.reward.grads(&tape, &g));
        for h in b.q.iter().chain(&b.cost).chain(&b.cost_value).chain(&b.decoder) {
            grads.extend(h.grads(&tape, &g));
        }
        Ok(ModelLoss { parts, grads, latents })
    }

    /// Weighted observation reconstruction error `w · Σ_t λ^t mean(‖dec(ẑ_t) − s_t‖²)`
    /// along the dynamics rollout.
    pub fn decoder_loss(&self, batch: &SegmentBatch, weight: f64) -> Result<f64> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::config("decoder_loss called with the decoder disabled"))?;
        let mut z = self.encode_batch(&batch.obs[0])?;
        let mut total = 0.0;
        for t in 0..batch.steps() {
            let recon = dec.forward(&z)?;
            let mse = recon.zip_map(&batch.obs[t], |a, b| (a - b) * (a - b)).mean();
            total += self.config.rollout_weight.powi(t as i32) * mse;
            z = self.next(&z, &batch.actions[t])?;
        }
        Ok(weight * total)
    }

    /// Reconstructed observation for one latent (decoder ablation only).
    pub fn decode_observation(&self, z: &LatentState) -> Result<Vec<f64>> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::config("decoder is disabled"))?;
        Ok(dec.forward(&z.to_row())?.into_vec())
    }

    /// `target ← (1 − τ)·target + τ·online` for both value ensembles.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::config(format!("EMA rate must lie in (0, 1], got {tau}")));
        }
        for (t, o) in self.q_target.iter_mut().zip(&self.q) {
            t.soft_update_from(o, tau);
        }
        for (t, o) in self.cost_value_target.iter_mut().zip(&self.cost_value) {
            t.soft_update_from(o, tau);
        }
        Ok(())
    }

    /// One optimizer step on the model loss followed by the EMA update.
    pub fn update(&mut self, batch: &SegmentBatch, policy: &PolicyNet, rng: &mut dyn RngCore) -> Result<(ModelLossParts, Vec<Matrix>)> {
        let targets = self.td_targets(batch, policy, rng)?;
        let loss = self.model_loss(batch, &targets)?;
        let mut opt = std::mem::replace(&mut self.optimizer, Adam::new(&[], AdamConfig::default()));
        let result = opt.step(&mut self.online_params_mut(), &loss.grads);
        self.optimizer = opt;
        result?;
        if !self.online_nets().iter().all(|n| n.is_finite()) {
            return Err(Error::training("world model parameters became non-finite"));
        }
        self.ema_update(self.config.tau)?;
        Ok((loss.parts, loss.latents))
    }
}

impl LatentModel for WorldModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn discount(&self) -> f64 {
        self.config.gamma
    }

    fn cost_discount(&self) -> f64 {
        self.config.gamma_c
    }

    fn next(&self, z: &Matrix, a: &Matrix) -> Result<Matrix> {
        self.dynamics.forward(&self.za(z, a)?)
    }

    fn reward(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        Ok(decode_logits_batch(&self.reward.forward(&self.za(z, a)?)?, &self.config.bins))
    }

    fn cost_max(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let heads = self.heads(&self.cost, &self.za(z, a)?)?;
        Ok((0..z.rows()).map(|i| heads.iter().map(|h| h[i]).fold(f64::NEG_INFINITY, f64::max)).collect())
    }

    fn value_avg(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let heads = self.heads(&self.q, &self.za(z, a)?)?;
        Ok((0..z.rows()).map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / heads.len() as f64).collect())
    }

    fn cost_value_avg(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let heads = self.heads(&self.cost_value, &self.za(z, a)?)?;
        Ok((0..z.rows()).map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / heads.len() as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::representation::symexp;
    use crate::safe_policy::PolicyConfig;

    const OBS: usize = 4;
    const ACT: usize = 2;

    fn small(horizon: usize) -> WorldModelConfig {
        WorldModelConfig {
            latent_dim: 6,
            simnorm_group: 3,
            hidden_dim: 8,
            hidden_layers: 1,
            num_q: 5,
            num_cost: 2,
            num_cost_value: 2,
            bins: BinSpec::new(21, -5.0, 5.0).unwrap(),
            horizon,
            ..WorldModelConfig::default()
        }
    }

    fn model(cfg: WorldModelConfig) -> WorldModel {
        WorldModel::new(cfg, OBS, ACT, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn segments(steps: usize, terminated: bool, rng: &mut ChaCha8Rng) -> Vec<Segment> {
        (0..3)
            .map(|_| {
                let obs: Vec<Vec<f64>> = (0..=steps).map(|_| (0..OBS).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                Segment {
                    observations: obs[..steps].to_vec(),
                    actions: (0..steps).map(|_| (0..ACT).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                    rewards: (0..steps).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    costs: (0..steps).map(|_| rng.random_range(0.0..1.0)).collect(),
                    next_observations: obs[1..].to_vec(),
                    terminated: vec![terminated; steps],
                }
            })
            .collect()
    }

    fn policy(latent: usize) -> PolicyNet {
        PolicyNet::new(latent, ACT, &PolicyConfig::default(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap()
    }

    /// Puts every value head's mass on one bin, so head `j` predicts `values[j]`.
    fn pin_q_heads(m: &mut WorldModel, bins: &[usize]) -> Vec<f64> {
        let spec = m.config().bins.clone();
        let (_, q, _, _) = m.heads_mut();
        for (head, &bin) in q.iter_mut().zip(bins) {
            let mut flat = vec![0.0; head.num_params()];
            let start = flat.len() - spec.count;
            flat[start + bin] = 80.0;
            head.set_flat_params(&flat).unwrap();
        }
        bins.iter().map(|&b| symexp(spec.center(b))).collect()
    }

    #[test]
    fn encoder_output_is_simplicial() {
        let m = model(small(1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = Matrix::from_vec(7, OBS, (0..7 * OBS).map(|_| rng.random_range(-50.0..50.0)).collect());
        let z = m.encode_batch(&obs).unwrap();
        for i in 0..z.rows() {
            for g in z.row(i).chunks(3) {
                assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(g.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn value_reductions_over_pinned_heads() {
        let mut m = model(small(1));
        // Head order scrambled against value order.
        let values = pin_q_heads(&mut m, &[14, 11, 12, 10, 13]);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let z = m.encode(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let avg = m.value_reward(&z, &[0.0, 0.0], ValueMode::Avg, &mut rng).unwrap();
        assert!((avg - values.iter().sum::<f64>() / 5.0).abs() < 1e-9);

        // Minimum rank of a uniformly drawn pair out of five: (1·4 + 2·3 + 3·2 + 4·1) / 10 = 2.
        let draws = 40_000;
        let mut rank_sum = 0usize;
        for _ in 0..draws {
            let v = m.value_reward(&z, &[0.0, 0.0], ValueMode::MinSubsample, &mut rng).unwrap();
            let rank = sorted.iter().position(|&s| (s - v).abs() < 1e-9).expect("value of some head");
            assert!(rank < 4, "the largest head can never be a pair minimum");
            rank_sum += rank + 1;
        }
        let mean_rank = rank_sum as f64 / draws as f64;
        assert!((mean_rank - 2.0).abs() < 0.02, "mean rank {mean_rank}");
    }

    #[test]
    fn subsample_draws_distinct_sorted_heads() {
        let m = model(small(1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [[0usize; 5]; 5];
        for _ in 0..10_000 {
            let idx = m.subsample_q(&mut rng).unwrap();
            assert_eq!(idx.len(), 2);
            assert!(idx[0] < idx[1] && idx[1] < 5);
            counts[idx[0]][idx[1]] += 1;
        }
        for i in 0..5 {
            for j in i + 1..5 {
                assert!((counts[i][j] as f64 / 10_000.0 - 0.1).abs() < 0.015, "pair ({i}, {j}): {}", counts[i][j]);
            }
        }
    }

    #[test]
    fn terminal_td_targets_are_the_immediate_signal() {
        let m = model(small(1));
        let batch = SegmentBatch::from_segments(&segments(2, true, &mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        let t = m.td_targets(&batch, &policy(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.q, batch.rewards);
        assert_eq!(t.qc, batch.costs);
    }

    #[test]
    fn td_targets_bootstrap_from_pinned_heads() {
        let mut cfg = small(1);
        cfg.reward_target = ValueMode::Avg;
        let mut m = model(cfg);
        let values = pin_q_heads(&mut m, &[12, 12, 13, 14, 15]);
        let online = m.q_heads().to_vec();
        let (q_target, _) = m.target_heads_mut();
        q_target.clone_from_slice(&online);
        let batch = SegmentBatch::from_segments(&segments(2, false, &mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        let t = m.td_targets(&batch, &policy(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let boot = 0.99 * values.iter().sum::<f64>() / 5.0;
        for (row, rewards) in t.q.iter().zip(&batch.rewards) {
            for (q, r) in row.iter().zip(rewards) {
                assert!((q - (r + boot)).abs() < 1e-9);
            }
        }
    }

    fn loss_total(cfg: WorldModelConfig, segs: &[Segment]) -> ModelLossParts {
        let m = model(cfg);
        let batch = SegmentBatch::from_segments(segs).unwrap();
        let t = m.td_targets(&batch, &policy(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.model_loss(&batch, &t).unwrap().parts
    }

    #[test]
    fn rollout_loss_is_a_polynomial_in_the_step_weight() {
        let segs = segments(3, false, &mut ChaCha8Rng::seed_from_u64(7));
        let total = |w: f64| loss_total(WorldModelConfig { rollout_weight: w, ..small(2) }, &segs).total;
        // Recover per-step losses from three weights, then predict a fourth.
        let ws: [f64; 3] = [1.0, 0.5, 0.25];
        let a = nalgebra::Matrix3::from_fn(|i, j| ws[i].powi(j as i32));
        let b = nalgebra::Vector3::from_iterator(ws.iter().map(|&w| total(w)));
        let l = a.lu().solve(&b).unwrap();
        assert!(l.iter().all(|&x| x > 0.0));
        let predicted = l[0] + 0.75 * l[1] + 0.5625 * l[2];
        assert!((total(0.75) - predicted).abs() < 1e-9 * predicted);

        // A zero-horizon model on the first transition sees exactly the first term.
        let first: Vec<Segment> = segs
            .iter()
            .map(|s| Segment {
                observations: s.observations[..1].to_vec(),
                actions: s.actions[..1].to_vec(),
                rewards: s.rewards[..1].to_vec(),
                costs: s.costs[..1].to_vec(),
                next_observations: s.next_observations[..1].to_vec(),
                terminated: s.terminated[..1].to_vec(),
            })
            .collect();
        let h0 = loss_total(small(0), &first).total;
        assert!((h0 - l[0]).abs() < 1e-9 * h0, "{h0} vs {}", l[0]);
    }

    #[test]
    fn total_is_linear_in_the_coefficients() {
        let segs = segments(3, false, &mut ChaCha8Rng::seed_from_u64(8));
        let coefs = [1.5, 0.5, 2.0, 0.25, 3.0];
        let cfg = WorldModelConfig {
            consistency_coef: coefs[0],
            reward_coef: coefs[1],
            value_coef: coefs[2],
            cost_coef: coefs[3],
            cost_value_coef: coefs[4],
            ..small(2)
        };
        let p = loss_total(cfg, &segs);
        let expected = coefs[0] * p.consistency + coefs[1] * p.reward + coefs[2] * p.value + coefs[3] * p.cost + coefs[4] * p.cost_value;
        assert!((p.total - expected).abs() < 1e-12 * expected);
        assert_eq!(p.decoder, 0.0);
    }

    #[test]
    fn decoder_term_matches_reconstruction_error() {
        let mut cfg = small(0);
        cfg.decoder = DecoderConfig { enabled: true, weight: 0.5, no_consistency: true };
        let segs = segments(1, false, &mut ChaCha8Rng::seed_from_u64(9));
        let p = loss_total(cfg.clone(), &segs);
        assert_eq!(p.total, p.reward + p.value + p.cost + p.cost_value + 0.5 * p.decoder);

        let m = model(cfg);
        let mut mse = 0.0;
        for s in &segs {
            let recon = m.decode_observation(&m.encode(&s.observations[0]).unwrap()).unwrap();
            mse += recon.iter().zip(&s.observations[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / OBS as f64;
        }
        mse /= segs.len() as f64;
        assert!((p.decoder - mse).abs() < 1e-12);
        let batch = SegmentBatch::from_segments(&segs).unwrap();
        assert!((m.decoder_loss(&batch, 0.5).unwrap() - 0.5 * mse).abs() < 1e-12);
    }

    #[test]
    fn ema_moves_targets_toward_online() {
        let mut m = model(small(1));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for net in m.online_nets_mut() {
            let flat: Vec<f64> = (0..net.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            net.set_flat_params(&flat).unwrap();
        }
        let before: Vec<Vec<f64>> = m.q_target_heads().iter().chain(m.cost_value_target_heads()).map(DenseNet::flat_params).collect();
        let online: Vec<Vec<f64>> = m.q_heads().iter().chain(m.cost_value_heads()).map(DenseNet::flat_params).collect();
        m.ema_update(0.01).unwrap();
        let after: Vec<Vec<f64>> = m.q_target_heads().iter().chain(m.cost_value_target_heads()).map(DenseNet::flat_params).collect();
        for ((b, o), a) in before.iter().zip(&online).zip(&after) {
            for ((b, o), a) in b.iter().zip(o).zip(a) {
                assert!((a - (0.99 * b + 0.01 * o)).abs() < 1e-15);
            }
        }
        assert!(m.ema_update(0.0).is_err());
        assert!(m.ema_update(1.5).is_err());
    }
}
