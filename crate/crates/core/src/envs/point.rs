use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, StepResult};
use crate::error::{Error, Result};

/// Point-navigation task parameters.
///
/// Observation layout (width `4 + 3·observed_hazards`):
/// `[vx, vy, goal_dx, goal_dy, (hazard_dx, hazard_dy, hazard_radius) × observed_hazards]`,
/// displacements relative to the agent, hazards sorted nearest first and padded
/// with zeros (radius 0 marks an absent hazard).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointHazardConfig {
    /// The arena is `[-arena_half, arena_half]²`.
    pub arena_half: f64,
    pub hazard_count: usize,
    pub hazard_radius: f64,
    /// How many of the hazards are dropped near the start–goal segment.
    pub path_hazards: usize,
    pub episode_length: usize,
    pub goal_tolerance: f64,
    /// Reward per unit of distance closed toward the goal.
    pub progress_coef: f64,
    pub goal_bonus: f64,
    /// Velocity change per unit action per step.
    pub accel: f64,
    /// Fraction of velocity lost per step.
    pub damping: f64,
    /// Extra margin beyond a hazard's radius kept free around the start and the goal.
    pub clearance: f64,
    pub min_goal_distance: f64,
    pub observed_hazards: usize,
    pub cost_per_hazard_step: f64,
}

impl Default for PointHazardConfig {
    fn default() -> Self {
        Self {
            arena_half: 2.0,
            hazard_count: 8,
            hazard_radius: 0.3,
            path_hazards: 0,
            episode_length: 200,
            goal_tolerance: 0.3,
            progress_coef: 1.0,
            goal_bonus: 10.0,
            accel: 0.02,
            damping: 0.1,
            clearance: 0.1,
            min_goal_distance: 1.0,
            observed_hazards: 4,
            cost_per_hazard_step: 1.0,
        }
    }
}

impl PointHazardConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_half", self.arena_half),
            ("goal_tolerance", self.goal_tolerance),
            ("accel", self.accel),
            ("cost_per_hazard_step", self.cost_per_hazard_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(format!("env.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config(format!("env.damping must lie in [0, 1), got {}", self.damping)));
        }
        if self.hazard_radius < 0.0 || self.clearance < 0.0 {
            return Err(Error::config("env.hazard_radius and env.clearance must be non-negative"));
        }
        if self.path_hazards > self.hazard_count {
            return Err(Error::config("env.path_hazards cannot exceed env.hazard_count"));
        }
        if self.episode_length == 0 {
            return Err(Error::config("env.episode_length must be at least 1"));
        }
        if self.min_goal_distance >= 2.0 * std::f64::consts::SQRT_2 * self.arena_half {
            return Err(Error::config("env.min_goal_distance does not fit in the arena"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hazard {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Hazard {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        dist(self.center, p) <= self.radius
    }
}

/// Clipped, damped double integrator in a square arena with circular hazards.
///
/// Reward is the per-step decrease in distance to the goal plus `goal_bonus` on
/// arrival; cost is `cost_per_hazard_step` whenever the agent ends a step inside
/// any hazard.
#[derive(Clone, Debug)]
pub struct PointHazardEnv {
    config: PointHazardConfig,
    position: [f64; 2],
    velocity: [f64; 2],
    goal: [f64; 2],
    hazards: Vec<Hazard>,
    t: usize,
    done: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PointHazardEnv {
    pub fn new(config: PointHazardConfig) -> Result<Self> {
        config.validate()?;
        let mut env = Self {
            config,
            position: [0.0; 2],
            velocity: [0.0; 2],
            goal: [0.0; 2],
            hazards: Vec::new(),
            t: 0,
            done: true,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &PointHazardConfig {
        &self.config
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.velocity
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn hazards(&self) -> &[Hazard] {
        &self.hazards
    }

    pub fn distance_to_goal(&self) -> f64 {
        dist(self.position, self.goal)
    }

    /// Per-step cost at the current position.
    pub fn current_cost(&self) -> f64 {
        if self.hazards.iter().any(|h| h.contains(self.position)) {
            self.config.cost_per_hazard_step
        } else {
            0.0
        }
    }

    /// Teleports the agent (tests and diagnostics).
    pub fn place_agent(&mut self, position: [f64; 2], velocity: [f64; 2]) {
        self.position = position;
        self.velocity = velocity;
    }

    pub fn observation(&self) -> Vec<f64> {
        let k = self.config.observed_hazards;
        let mut obs = Vec::with_capacity(4 + 3 * k);
        obs.extend_from_slice(&self.velocity);
        obs.push(self.goal[0] - self.position[0]);
        obs.push(self.goal[1] - self.position[1]);
        let mut nearest: Vec<&Hazard> = self.hazards.iter().collect();
        nearest.sort_by(|a, b| {
            dist(a.center, self.position)
                .total_cmp(&dist(b.center, self.position))
                .then(a.center[0].total_cmp(&b.center[0]))
                .then(a.center[1].total_cmp(&b.center[1]))
        });
        for i in 0..k {
            match nearest.get(i) {
                Some(h) => obs.extend_from_slice(&[
                    h.center[0] - self.position[0],
                    h.center[1] - self.position[1],
                    h.radius,
                ]),
                None => obs.extend_from_slice(&[0.0, 0.0, 0.0]),
            }
        }
        obs
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng, margin: f64) -> [f64; 2] {
        let lim = (self.config.arena_half - margin).max(0.0);
        [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)]
    }

    fn keeps_clear(&self, hazard_center: [f64; 2], start: [f64; 2], goal: [f64; 2]) -> bool {
        let keep = self.config.hazard_radius + self.config.clearance;
        dist(hazard_center, start) > keep && dist(hazard_center, goal) > keep
    }

    fn place(&mut self, rng: &mut ChaCha8Rng) {
        const ATTEMPTS: usize = 1000;
        let c = self.config.clone();
        loop {
            let goal = self.sample_point(rng, c.goal_tolerance);
            let start = loop {
                let p = self.sample_point(rng, 0.0);
                if dist(p, goal) >= c.min_goal_distance {
                    break p;
                }
            };
            let mut hazards = Vec::with_capacity(c.hazard_count);
            let mut ok = true;
            for i in 0..c.hazard_count {
                let mut placed = None;
                for _ in 0..ATTEMPTS {
                    let center = if i < c.path_hazards {
                        let f: f64 = rng.random_range(0.25..0.75);
                        let jitter = c.hazard_radius * 0.5;
                        [
                            start[0] + f * (goal[0] - start[0]) + rng.random_range(-jitter..=jitter),
                            start[1] + f * (goal[1] - start[1]) + rng.random_range(-jitter..=jitter),
                        ]
                    } else {
                        self.sample_point(rng, 0.0)
                    };
                    if self.keeps_clear(center, start, goal) {
                        placed = Some(center);
                        break;
                    }
                }
                match placed {
                    Some(center) => hazards.push(Hazard { center, radius: c.hazard_radius }),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                self.goal = goal;
                self.position = start;
                self.hazards = hazards;
                return;
            }
        }
    }
}

impl Env for PointHazardEnv {
    fn observation_dim(&self) -> usize {
        4 + 3 * self.config.observed_hazards
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.place(&mut rng);
        self.velocity = [0.0; 2];
        self.t = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; call reset first".into()));
        }
        if action.len() != 2 {
            return Err(Error::config(format!("point env expects a 2-D action, got {}", action.len())));
        }
        let c = &self.config;
        let before = self.distance_to_goal();
        for k in 0..2 {
            let a = action[k].clamp(-1.0, 1.0);
            self.velocity[k] = (1.0 - c.damping) * self.velocity[k] + c.accel * a;
            let p = self.position[k] + self.velocity[k];
            let clipped = p.clamp(-c.arena_half, c.arena_half);
            if clipped != p {
                self.velocity[k] = 0.0;
            }
            self.position[k] = clipped;
        }
        self.t += 1;
        let after = self.distance_to_goal();
        let mut reward = c.progress_coef * (before - after);
        let terminated = after <= c.goal_tolerance;
        if terminated {
            reward += c.goal_bonus;
        }
        let truncated = !terminated && self.t >= c.episode_length;
        self.done = terminated || truncated;
        Ok(StepResult { observation: self.observation(), reward, cost: self.current_cost(), terminated, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_observation() {
        let mut a = PointHazardEnv::new(PointHazardConfig::default()).unwrap();
        let mut b = PointHazardEnv::new(PointHazardConfig::default()).unwrap();
        assert_eq!(a.reset(42), b.reset(42));
        assert_ne!(a.reset(43), b.reset(42));
    }

    #[test]
    fn reset_starts_outside_hazards() {
        let mut env = PointHazardEnv::new(PointHazardConfig { hazard_count: 12, ..Default::default() }).unwrap();
        for seed in 0..200 {
            env.reset(seed);
            assert_eq!(env.current_cost(), 0.0);
        }
    }

    #[test]
    fn zero_action_at_rest_stays_put() {
        let mut env = PointHazardEnv::new(PointHazardConfig::default()).unwrap();
        env.reset(1);
        let p = env.position();
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(env.position(), p);
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn inside_hazard_costs_one() {
        let mut env = PointHazardEnv::new(PointHazardConfig::default()).unwrap();
        env.reset(2);
        let h = env.hazards()[0];
        env.place_agent(h.center, [0.0, 0.0]);
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.cost, 1.0);
    }

    #[test]
    fn stepping_a_finished_episode_is_a_usage_error() {
        let cfg = PointHazardConfig { episode_length: 2, ..Default::default() };
        let mut env = PointHazardEnv::new(cfg).unwrap();
        env.reset(0);
        env.step(&[0.0, 0.0]).unwrap();
        let last = env.step(&[0.0, 0.0]).unwrap();
        assert!(last.truncated);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn observation_layout_has_documented_width() {
        let env = PointHazardEnv::new(PointHazardConfig { hazard_count: 2, ..Default::default() }).unwrap();
        let obs = env.observation();
        assert_eq!(obs.len(), env.observation_dim());
        assert_eq!(obs.len(), 16);
        // two real hazards then two zero-padded slots
        assert!(obs[6] > 0.0 && obs[9] > 0.0);
        assert_eq!(&obs[10..], &[0.0; 6]);
    }

    #[test]
    fn goal_is_never_inside_a_hazard() {
        let cfg = PointHazardConfig { hazard_count: 10, path_hazards: 3, ..Default::default() };
        let mut env = PointHazardEnv::new(cfg).unwrap();
        for seed in 0..10_000 {
            env.reset(seed);
            let g = env.goal();
            assert!(env.hazards().iter().all(|h| !h.contains(g)), "seed {seed}");
        }
    }

    #[test]
    fn straight_run_matches_hand_simulation() {
        let cfg = PointHazardConfig { hazard_count: 0, ..Default::default() };
        let mut env = PointHazardEnv::new(cfg.clone()).unwrap();
        env.reset(5);
        let (start, goal) = (env.position(), env.goal());
        let d0 = dist(start, goal);
        let dir = [(goal[0] - start[0]) / d0, (goal[1] - start[1]) / d0];

        let (mut p, mut v) = (start, [0.0f64; 2]);
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let r = env.step(&dir).unwrap();
            for k in 0..2 {
                v[k] = (1.0 - cfg.damping) * v[k] + cfg.accel * dir[k];
                p[k] += v[k];
            }
            steps += 1;
            assert_eq!(env.position(), p);
            total += r.reward;
            assert_eq!(r.cost, 0.0);
            if r.done() {
                assert!(r.terminated, "straight run should reach the goal");
                break;
            }
        }
        let expected = d0 - dist(p, goal) + cfg.goal_bonus;
        assert!((total - expected).abs() < 1e-9, "{total} vs {expected}");
        assert!(steps < cfg.episode_length);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut env = PointHazardEnv::new(PointHazardConfig::default()).unwrap();
            env.reset(9);
            (0..50)
                .map(|t| {
                    let a = [(t as f64 * 0.3).sin(), (t as f64 * 0.7).cos()];
                    let r = env.step(&a).unwrap();
                    (r.observation, r.reward.to_bits(), r.cost.to_bits())
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn path_hazards_sit_between_start_and_goal() {
        let cfg = PointHazardConfig { hazard_count: 1, path_hazards: 1, ..Default::default() };
        let mut env = PointHazardEnv::new(cfg).unwrap();
        for seed in 0..50 {
            env.reset(seed);
            let (s, g, h) = (env.position(), env.goal(), env.hazards()[0].center);
            // the hazard is closer to the segment midpoint than either endpoint is
            let mid = [(s[0] + g[0]) / 2.0, (s[1] + g[1]) / 2.0];
            assert!(dist(h, mid) < dist(s, g) / 2.0);
        }
    }
}
