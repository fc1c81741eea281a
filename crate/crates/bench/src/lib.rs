//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spowl_core::envs::Env;
use spowl_core::harness::{Agent, RunConfig};
use spowl_core::world_model::{Segment, SegmentBatch};

/// The desk configuration shipped in `configs/desk.toml`.
pub fn desk_config() -> RunConfig {
    RunConfig::from_toml_str(include_str!("../../../configs/desk.toml")).expect("desk config parses")
}

/// An untrained agent for `cfg` on the point environment.
pub fn agent(cfg: &RunConfig, seed: u64) -> Agent {
    let env = cfg.env.build().expect("env builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Agent::new(cfg, env.observation_dim(), env.action_dim(), &mut rng).expect("agent builds")
}

/// A training batch of identical segments with the right shapes for `cfg`.
pub fn batch(cfg: &RunConfig, obs_dim: usize) -> SegmentBatch {
    let h = cfg.world_model.horizon + 1;
    let obs = vec![0.1; obs_dim];
    let seg = Segment {
        observations: vec![obs.clone(); h],
        actions: vec![vec![0.1, -0.2]; h],
        rewards: vec![0.5; h],
        costs: vec![0.0; h],
        next_observations: vec![obs; h],
        terminated: vec![false; h],
    };
    SegmentBatch::from_segments(&vec![seg; cfg.batch_size]).expect("batch builds")
}
