use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, StepResult};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::planner::{ActionPolicy, LatentModel};

/// The five grid moves. Each has a fixed embedding in the continuous action
/// square; a continuous action selects the move whose embedding is nearest
/// (ties go to the lower index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridAction {
    Stay,
    Right,
    Left,
    Up,
    Down,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [GridAction::Stay, GridAction::Right, GridAction::Left, GridAction::Up, GridAction::Down];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn embedding(self) -> [f64; 2] {
        match self {
            GridAction::Stay => [0.0, 0.0],
            GridAction::Right => [1.0, 0.0],
            GridAction::Left => [-1.0, 0.0],
            GridAction::Up => [0.0, 1.0],
            GridAction::Down => [0.0, -1.0],
        }
    }

    pub fn nearest(a: &[f64]) -> Self {
        let x = a.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        let y = a.get(1).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        let mut best = GridAction::Stay;
        let mut best_d = f64::INFINITY;
        for g in Self::ALL {
            let e = g.embedding();
            let d = (x - e[0]).powi(2) + (y - e[1]).powi(2);
            if d < best_d {
                best = g;
                best_d = d;
            }
        }
        best
    }
}

/// Tabular CMDP on a `width x height` grid.
///
/// Cells are indexed `y·width + x`. Reward and cost are paid for the cell the
/// agent lands in. With probability `slip` the chosen move is replaced by a
/// uniformly random one. Moves into a wall leave the agent in place.
/// Observations are one-hot cell indicators. Episodes only end by truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridCmdpConfig {
    pub width: usize,
    pub height: usize,
    pub slip: f64,
    /// Row-major, `width·height` entries.
    pub rewards: Vec<f64>,
    /// Row-major, `width·height` non-negative entries.
    pub costs: Vec<f64>,
    pub start: usize,
    pub episode_length: usize,
}

impl Default for GridCmdpConfig {
    /// A 5x5 grid: start bottom-left, goal (reward 1) top-right, and a hazard
    /// block (cost 1) across the middle that the short route passes through.
    fn default() -> Self {
        let (w, h) = (5, 5);
        let mut rewards = vec![0.0; w * h];
        let mut costs = vec![0.0; w * h];
        rewards[(h - 1) * w + (w - 1)] = 1.0;
        for (x, y) in [(1, 1), (2, 1), (1, 2), (2, 2), (3, 2), (2, 3), (3, 3)] {
            costs[y * w + x] = 1.0;
        }
        Self { width: w, height: h, slip: 0.0, rewards, costs, start: 0, episode_length: 50 }
    }
}

impl GridCmdpConfig {
    /// A grid with all-zero reward and cost tables.
    pub fn blank(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, rewards: vec![0.0; n], costs: vec![0.0; n], ..Self::default() }
    }

    /// Rewards uniform in `[-1, 1]`, costs in `{0, 1}` with probability `hazard_p`.
    pub fn random<R: Rng + ?Sized>(width: usize, height: usize, slip: f64, hazard_p: f64, rng: &mut R) -> Self {
        let n = width * height;
        let rewards = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let costs = (0..n).map(|_| if rng.random_bool(hazard_p) { 1.0 } else { 0.0 }).collect();
        Self { width, height, slip, rewards, costs, start: 0, episode_length: 100 }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cells();
        if n == 0 {
            return Err(Error::config("grid must have at least one cell"));
        }
        if self.rewards.len() != n || self.costs.len() != n {
            return Err(Error::config(format!(
                "grid tables must have {n} entries, got {} rewards and {} costs",
                self.rewards.len(),
                self.costs.len()
            )));
        }
        if self.costs.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::config("grid costs must be non-negative"));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::config("grid rewards must be finite"));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(Error::config(format!("grid slip must lie in [0, 1], got {}", self.slip)));
        }
        if self.start >= n {
            return Err(Error::config(format!("grid start {} out of range", self.start)));
        }
        if self.episode_length == 0 {
            return Err(Error::config("grid episode_length must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GridCmdp {
    config: GridCmdpConfig,
    state: usize,
    t: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl GridCmdp {
    pub fn new(config: GridCmdpConfig) -> Result<Self> {
        config.validate()?;
        let state = config.start;
        Ok(Self { config, state, t: 0, done: false, rng: ChaCha8Rng::seed_from_u64(0) })
    }

    pub fn config(&self) -> &GridCmdpConfig {
        &self.config
    }

    pub fn num_states(&self) -> usize {
        self.config.cells()
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, s: usize) {
        self.state = s;
    }

    /// Deterministic successor of `s` under move `a`.
    pub fn successor(&self, s: usize, a: GridAction) -> usize {
        let w = self.config.width;
        let (x, y) = (s % w, s / w);
        let (nx, ny) = match a {
            GridAction::Stay => (x, y),
            GridAction::Right => ((x + 1).min(w - 1), y),
            GridAction::Left => (x.saturating_sub(1), y),
            GridAction::Up => (x, (y + 1).min(self.config.height - 1)),
            GridAction::Down => (x, y.saturating_sub(1)),
        };
        ny * w + nx
    }

    /// `P(· | s, a)` as a dense row.
    pub fn transition_probs(&self, s: usize, a: GridAction) -> Vec<f64> {
        let mut p = vec![0.0; self.num_states()];
        let slip = self.config.slip;
        p[self.successor(s, a)] += 1.0 - slip;
        for b in GridAction::ALL {
            p[self.successor(s, b)] += slip / GridAction::COUNT as f64;
        }
        p
    }

    /// Expected immediate reward and cost of taking `a` in `s`.
    pub fn expected_reward_cost(&self, s: usize, a: GridAction) -> (f64, f64) {
        let p = self.transition_probs(s, a);
        let r = p.iter().zip(&self.config.rewards).map(|(p, r)| p * r).sum();
        let c = p.iter().zip(&self.config.costs).map(|(p, c)| p * c).sum();
        (r, c)
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states()];
        v[s] = 1.0;
        v
    }

    /// Model whose latent is a distribution over cells, so rollouts and values
    /// are exact expectations. Values come from evaluating `policy`.
    pub fn exact_model(&self, policy: &GridPolicy, gamma: f64, gamma_c: f64) -> Result<GridExactModel> {
        let values = grid_oracle_values(self, policy, gamma, gamma_c)?;
        Ok(GridExactModel { env: self.clone(), values })
    }
}

impl Env for GridCmdp {
    fn observation_dim(&self) -> usize {
        self.num_states()
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.config.start;
        self.t = 0;
        self.done = false;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; call reset first".into()));
        }
        if action.len() != 2 {
            return Err(Error::config(format!("grid env expects a 2-D action, got {}", action.len())));
        }
        let mut a = GridAction::nearest(action);
        if self.config.slip > 0.0 && self.rng.random_bool(self.config.slip) {
            a = GridAction::from_index(self.rng.random_range(0..GridAction::COUNT));
        }
        self.state = self.successor(self.state, a);
        self.t += 1;
        let truncated = self.t >= self.config.episode_length;
        self.done = truncated;
        Ok(StepResult {
            observation: self.one_hot(self.state),
            reward: self.config.rewards[self.state],
            cost: self.config.costs[self.state],
            terminated: false,
            truncated,
        })
    }
}

/// Stochastic policy table: one probability row over [`GridAction::ALL`] per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPolicy {
    pub probs: Vec<[f64; 5]>,
}

impl GridPolicy {
    pub fn uniform(states: usize) -> Self {
        Self { probs: vec![[0.2; 5]; states] }
    }

    pub fn deterministic(actions: &[GridAction]) -> Self {
        let probs = actions
            .iter()
            .map(|a| {
                let mut row = [0.0; 5];
                row[a.index()] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn random<R: Rng + ?Sized>(states: usize, rng: &mut R) -> Self {
        let probs = (0..states)
            .map(|_| {
                let mut row = [0.0; 5];
                for v in &mut row {
                    *v = rng.random_range(0.05..1.0);
                }
                let s: f64 = row.iter().sum();
                row.map(|v| v / s)
            })
            .collect();
        Self { probs }
    }

    pub fn validate(&self, states: usize) -> Result<()> {
        if self.probs.len() != states {
            return Err(Error::config(format!("policy has {} rows, grid has {states} states", self.probs.len())));
        }
        for (s, row) in self.probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("policy row {s} is not a distribution: {row:?}")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> GridAction {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs[s].iter().enumerate() {
            acc += p;
            if u < acc {
                return GridAction::from_index(i);
            }
        }
        // u landed in the rounding gap above the last partial sum
        let last = self.probs[s].iter().rposition(|&p| p > 0.0).unwrap_or(0);
        GridAction::from_index(last)
    }

    /// Most probable action in `s` (lowest index on ties).
    pub fn mode(&self, s: usize) -> GridAction {
        let row = &self.probs[s];
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        GridAction::from_index(best)
    }
}

/// Exact discounted values of a [`GridPolicy`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridValues {
    pub gamma: f64,
    pub gamma_c: f64,
    /// Reward value per state.
    pub j: Vec<f64>,
    /// Cost value per state.
    pub j_c: Vec<f64>,
    /// Reward action-value per state and action.
    pub q: Vec<[f64; 5]>,
    /// Cost action-value per state and action.
    pub q_c: Vec<[f64; 5]>,
}

/// Exact policy evaluation by solving `(I − γ P_π) J = r_π` with an LU decomposition.
pub fn grid_oracle_values(env: &GridCmdp, policy: &GridPolicy, gamma: f64, gamma_c: f64) -> Result<GridValues> {
    let n = env.num_states();
    policy.validate(n)?;
    for (name, g) in [("gamma", gamma), ("gamma_c", gamma_c)] {
        if !(0.0..1.0).contains(&g) {
            return Err(Error::config(format!("{name} must lie in [0, 1), got {g}")));
        }
    }
    let mut p_pi = DMatrix::<f64>::zeros(n, n);
    let mut r_pi = DVector::<f64>::zeros(n);
    let mut c_pi = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in GridAction::ALL {
            let w = policy.probs[s][a.index()];
            if w == 0.0 {
                continue;
            }
            let row = env.transition_probs(s, a);
            for (s2, p) in row.iter().enumerate() {
                p_pi[(s, s2)] += w * p;
            }
            let (r, c) = env.expected_reward_cost(s, a);
            r_pi[s] += w * r;
            c_pi[s] += w * c;
        }
    }
    let solve = |g: f64, rhs: &DVector<f64>| -> Result<Vec<f64>> {
        let a = DMatrix::<f64>::identity(n, n) - &p_pi * g;
        a.lu()
            .solve(rhs)
            .map(|x| x.iter().copied().collect())
            .ok_or_else(|| Error::training("policy evaluation system is singular"))
    };
    let j = solve(gamma, &r_pi)?;
    let j_c = solve(gamma_c, &c_pi)?;
    let mut q = vec![[0.0; 5]; n];
    let mut q_c = vec![[0.0; 5]; n];
    let table = &env.config;
    for s in 0..n {
        for a in GridAction::ALL {
            let row = env.transition_probs(s, a);
            let mut qa = 0.0;
            let mut qca = 0.0;
            for (s2, p) in row.iter().enumerate() {
                qa += p * (table.rewards[s2] + gamma * j[s2]);
                qca += p * (table.costs[s2] + gamma_c * j_c[s2]);
            }
            q[s][a.index()] = qa;
            q_c[s][a.index()] = qca;
        }
    }
    Ok(GridValues { gamma, gamma_c, j, j_c, q, q_c })
}

/// Planner model for a [`GridCmdp`] whose latent is a probability vector over
/// cells. Every quantity is the exact expectation under that distribution; the
/// single cost head is the expected immediate cost.
#[derive(Clone, Debug)]
pub struct GridExactModel {
    env: GridCmdp,
    values: GridValues,
}

impl GridExactModel {
    pub fn env(&self) -> &GridCmdp {
        &self.env
    }

    pub fn values(&self) -> &GridValues {
        &self.values
    }

    pub fn latent(&self, s: usize) -> Matrix {
        Matrix::row_vector(&self.env.one_hot(s))
    }

    fn check(&self, z: &Matrix, a: &Matrix) -> Result<()> {
        if z.cols() != self.env.num_states() || a.cols() != 2 || z.rows() != a.rows() {
            return Err(Error::config(format!(
                "grid model expects ({}-wide latents, 2-wide actions) with equal rows, got {:?} and {:?}",
                self.env.num_states(),
                z.shape(),
                a.shape()
            )));
        }
        Ok(())
    }

    fn expect(&self, z: &Matrix, a: &Matrix, f: impl Fn(usize, GridAction) -> f64) -> Result<Vec<f64>> {
        self.check(z, a)?;
        Ok((0..z.rows())
            .map(|i| {
                let g = GridAction::nearest(a.row(i));
                z.row(i).iter().enumerate().filter(|(_, &p)| p != 0.0).map(|(s, &p)| p * f(s, g)).sum()
            })
            .collect())
    }
}

impl LatentModel for GridExactModel {
    fn latent_dim(&self) -> usize {
        self.env.num_states()
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn discount(&self) -> f64 {
        self.values.gamma
    }

    fn cost_discount(&self) -> f64 {
        self.values.gamma_c
    }

    fn next(&self, z: &Matrix, a: &Matrix) -> Result<Matrix> {
        self.check(z, a)?;
        let n = self.env.num_states();
        let mut out = Matrix::zeros(z.rows(), n);
        for i in 0..z.rows() {
            let g = GridAction::nearest(a.row(i));
            for s in 0..n {
                let p = z[(i, s)];
                if p == 0.0 {
                    continue;
                }
                for (s2, q) in self.env.transition_probs(s, g).into_iter().enumerate() {
                    out[(i, s2)] += p * q;
                }
            }
        }
        Ok(out)
    }

    fn reward(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        self.expect(z, a, |s, g| self.env.expected_reward_cost(s, g).0)
    }

    fn cost_max(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        self.expect(z, a, |s, g| self.env.expected_reward_cost(s, g).1)
    }

    fn value_avg(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        self.expect(z, a, |s, g| self.values.q[s][g.index()])
    }

    fn cost_value_avg(&self, z: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        self.expect(z, a, |s, g| self.values.q_c[s][g.index()])
    }
}

impl ActionPolicy for GridPolicy {
    /// Embedding of the modal action of the most probable cell.
    fn mean_action(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(z.rows(), 2);
        for i in 0..z.rows() {
            let row = z.row(i);
            let mut s = 0;
            for k in 1..row.len() {
                if row[k] > row[s] {
                    s = k;
                }
            }
            out.row_mut(i).copy_from_slice(&self.mode(s).embedding());
        }
        Ok(out)
    }

    /// Samples a cell from the latent, then an action from that cell's row.
    fn sample_action(&self, z: &Matrix, rng: &mut dyn RngCore) -> Result<Matrix> {
        let mut out = Matrix::zeros(z.rows(), 2);
        for i in 0..z.rows() {
            let row = z.row(i);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut s = row.len() - 1;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    s = k;
                    break;
                }
            }
            out.row_mut(i).copy_from_slice(&self.sample(s, rng).embedding());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_embedding_selects_moves() {
        assert_eq!(GridAction::nearest(&[0.9, 0.2]), GridAction::Right);
        assert_eq!(GridAction::nearest(&[-0.1, -0.8]), GridAction::Down);
        assert_eq!(GridAction::nearest(&[0.1, 0.1]), GridAction::Stay);
        // equidistant between Stay and Right goes to the lower index
        assert_eq!(GridAction::nearest(&[0.5, 0.0]), GridAction::Stay);
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let env = GridCmdp::new(GridCmdpConfig { slip: 0.3, ..Default::default() }).unwrap();
        for s in 0..env.num_states() {
            for a in GridAction::ALL {
                let sum: f64 = env.transition_probs(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let env = GridCmdp::new(GridCmdpConfig::blank(3, 3)).unwrap();
        let v = grid_oracle_values(&env, &GridPolicy::uniform(9), 0.9, 0.9).unwrap();
        assert!(v.j.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_absorbing_state_is_a_geometric_series() {
        let cfg = GridCmdpConfig { rewards: vec![1.0], costs: vec![0.0], ..GridCmdpConfig::blank(1, 1) };
        let env = GridCmdp::new(cfg).unwrap();
        let v = grid_oracle_values(&env, &GridPolicy::uniform(1), 0.9, 0.5).unwrap();
        assert!((v.j[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_stochastic_policy_rows_are_rejected() {
        let env = GridCmdp::new(GridCmdpConfig::blank(1, 2)).unwrap();
        let bad = GridPolicy { probs: vec![[0.5, 0.5, 0.5, 0.0, 0.0], [0.2; 5]] };
        assert!(matches!(grid_oracle_values(&env, &bad, 0.9, 0.9), Err(Error::Config(_))));
    }

    #[test]
    fn bellman_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let env = GridCmdp::new(GridCmdpConfig::random(4, 4, 0.2, 0.3, &mut rng)).unwrap();
        let pol = GridPolicy::random(16, &mut rng);
        let v = grid_oracle_values(&env, &pol, 0.95, 0.9).unwrap();
        for s in 0..16 {
            let mut jr = 0.0;
            let mut jc = 0.0;
            for a in GridAction::ALL {
                let w = pol.probs[s][a.index()];
                for (s2, p) in env.transition_probs(s, a).iter().enumerate() {
                    jr += w * p * (env.config().rewards[s2] + 0.95 * v.j[s2]);
                    jc += w * p * (env.config().costs[s2] + 0.9 * v.j_c[s2]);
                }
            }
            assert!((jr - v.j[s]).abs() <= 1e-9);
            assert!((jc - v.j_c[s]).abs() <= 1e-9);
        }
    }

    #[test]
    fn exact_values_match_monte_carlo_rollouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cfg = GridCmdpConfig::random(4, 4, 0.1, 0.3, &mut rng);
        cfg.start = 5;
        cfg.episode_length = usize::MAX;
        let mut env = GridCmdp::new(cfg).unwrap();
        let pol = GridPolicy::random(16, &mut rng);
        let gamma = 0.5;
        let v = grid_oracle_values(&env, &pol, gamma, gamma).unwrap();

        // 0.5^45 is far below the Monte-Carlo standard error
        let (episodes, horizon) = (1_000_000u64, 45);
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for ep in 0..episodes {
            env.reset(ep);
            let (mut g, mut gc, mut disc) = (0.0, 0.0, 1.0);
            for _ in 0..horizon {
                let a = pol.sample(env.state(), &mut rng);
                let r = env.step(&a.embedding()).unwrap();
                g += disc * r.reward;
                gc += disc * r.cost;
                disc *= gamma;
            }
            sum[0] += g;
            sum[1] += gc;
            sq[0] += g * g;
            sq[1] += gc * gc;
        }
        let n = episodes as f64;
        for (k, exact) in [v.j[5], v.j_c[5]].into_iter().enumerate() {
            let mean = sum[k] / n;
            let se = ((sq[k] / n - mean * mean) / n).sqrt();
            assert!((mean - exact).abs() <= 3.0 * se, "k={k}: mc {mean} vs exact {exact} (se {se})");
        }
    }

    #[test]
    fn exact_model_propagates_distributions() {
        let env = GridCmdp::new(GridCmdpConfig { slip: 0.5, ..Default::default() }).unwrap();
        let m = env.exact_model(&GridPolicy::uniform(25), 0.9, 0.9).unwrap();
        let z = m.latent(0);
        let right = Matrix::row_vector(&GridAction::Right.embedding());
        let z1 = m.next(&z, &right).unwrap();
        assert!((z1.sum() - 1.0).abs() < 1e-12);
        // from the corner: right w.p. 0.5 + 0.1, stay via stay/left/down slips 0.3, up 0.1
        assert!((z1[(0, 1)] - 0.6).abs() < 1e-12);
        assert!((z1[(0, 0)] - 0.3).abs() < 1e-12);
        assert!((z1[(0, 5)] - 0.1).abs() < 1e-12);
    }
}
