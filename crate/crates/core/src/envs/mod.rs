//! Built-in constrained MDPs.
//!
//! [`PointHazardEnv`] is a continuous 2-D navigation task with circular hazards;
//! [`GridCmdp`] is a small tabular CMDP whose values can be computed exactly and
//! serves as the oracle substrate for planner and world-model checks.

mod grid;
mod point;

use serde::{Deserialize, Serialize};

pub use grid::{grid_oracle_values, GridAction, GridCmdp, GridCmdpConfig, GridPolicy, GridValues};
pub use point::{Hazard, PointHazardConfig, PointHazardEnv};

use crate::error::Result;

/// One environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Always non-negative.
    pub cost: f64,
    /// The episode reached a terminal state; values do not bootstrap past it.
    pub terminated: bool,
    /// The episode hit its step limit.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// A CMDP with bounded continuous actions in `[-1, 1]^action_dim`.
pub trait Env {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Starts a new episode; identical seeds give identical episodes.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Errors with [`crate::Error::Usage`] once the episode is done.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

/// Environment selection as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvConfig {
    Point(PointHazardConfig),
    Grid(GridCmdpConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Point(PointHazardConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<AnyEnv> {
        Ok(match self {
            EnvConfig::Point(c) => AnyEnv::Point(PointHazardEnv::new(c.clone())?),
            EnvConfig::Grid(c) => AnyEnv::Grid(GridCmdp::new(c.clone())?),
        })
    }
}

/// Closed set of built-in environments.
#[derive(Clone, Debug)]
pub enum AnyEnv {
    Point(PointHazardEnv),
    Grid(GridCmdp),
}

impl Env for AnyEnv {
    fn observation_dim(&self) -> usize {
        match self {
            AnyEnv::Point(e) => e.observation_dim(),
            AnyEnv::Grid(e) => e.observation_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            AnyEnv::Point(e) => e.action_dim(),
            AnyEnv::Grid(e) => e.action_dim(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            AnyEnv::Point(e) => e.reset(seed),
            AnyEnv::Grid(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        match self {
            AnyEnv::Point(e) => e.step(action),
            AnyEnv::Grid(e) => e.step(action),
        }
    }
}
