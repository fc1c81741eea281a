use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::planner::{PlanMode, PlannerConfig};
use crate::safe_policy::PolicyConfig;
use crate::world_model::WorldModelConfig;

/// Which parts of the agent act and which constraints apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Adaptive-threshold planning plus plan/policy switching.
    #[default]
    Spowl,
    /// The policy acts alone; the planner is never called.
    PolicyOnly,
    /// Adaptive-threshold plans are always executed.
    PlanOnly,
    /// Fixed cost limit `planner.d_plan` on the full cost estimate; plans always executed.
    CceGlobal,
    /// Fixed cost limit on immediate predicted costs only; plans always executed.
    CceLocal,
    /// No cost penalty in the policy and reward-only planning; plans always executed.
    Unconstrained,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Spowl, Mode::PolicyOnly, Mode::PlanOnly, Mode::CceGlobal, Mode::CceLocal, Mode::Unconstrained];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Spowl => "spowl",
            Mode::PolicyOnly => "policy-only",
            Mode::PlanOnly => "plan-only",
            Mode::CceGlobal => "cce-global",
            Mode::CceLocal => "cce-local",
            Mode::Unconstrained => "unconstrained",
        }
    }

    /// Planner selection rule for this mode, `None` when the planner is unused.
    pub fn plan_mode(self) -> Option<PlanMode> {
        match self {
            Mode::Spowl | Mode::PlanOnly => Some(PlanMode::Adaptive),
            Mode::PolicyOnly => None,
            Mode::CceGlobal => Some(PlanMode::CceGlobal),
            Mode::CceLocal => Some(PlanMode::CceLocal),
            Mode::Unconstrained => Some(PlanMode::Unconstrained),
        }
    }

    /// Whether the policy objective includes the cost penalty.
    pub fn penalized(self) -> bool {
        self != Mode::Unconstrained
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}; expected one of spowl, policy-only, plan-only, cce-global, cce-local, unconstrained")))
    }
}

/// Everything a training run needs. Every field has a default, so a config
/// file only lists what it changes; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Environment steps.
    pub total_steps: usize,
    /// Initial steps with uniformly random actions and no updates.
    pub seed_steps: usize,
    /// Optimizer steps per environment step once `seed_steps` have passed.
    pub updates_per_step: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Evaluate every this many environment steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Episodes of the evaluation that closes every run.
    pub final_eval_episodes: usize,
    /// Write a numbered checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub env: EnvConfig,
    pub world_model: WorldModelConfig,
    pub policy: PolicyConfig,
    pub planner: PlannerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Spowl,
            total_steps: 100_000,
            seed_steps: 2_000,
            updates_per_step: 1,
            batch_size: 64,
            buffer_capacity: 200_000,
            eval_every: 5_000,
            eval_episodes: 10,
            final_eval_episodes: 20,
            checkpoint_every: 0,
            env: EnvConfig::default(),
            world_model: WorldModelConfig::default(),
            policy: PolicyConfig::default(),
            planner: PlannerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Toml(t) => Error::Config(format!("{}: {t}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// The planner configuration with its selection rule set from `mode`.
    pub fn planner_for_mode(&self) -> PlannerConfig {
        let mut p = self.planner.clone();
        p.mode = self.mode.plan_mode().unwrap_or_default();
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.buffer_capacity < self.world_model.horizon + 1 {
            return Err(Error::config("buffer_capacity must hold at least one training segment"));
        }
        if self.final_eval_episodes == 0 {
            return Err(Error::config("final_eval_episodes must be at least 1"));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes must be at least 1 when eval_every is set"));
        }
        self.world_model.validate()?;
        self.policy.validate()?;
        if self.mode.plan_mode().is_some() {
            self.planner_for_mode().validate()?;
        }
        if self.planner.horizon == 0 {
            return Err(Error::config("planner.horizon must be at least 1"));
        }
        self.env.build().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in ["bogus = 1", "[planner]\nbogus = 1", "[env]\nkind = \"point\"\nbogus = 1", "[world_model.bins]\nbogus = 1"] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig { mode: Mode::CceLocal, seed: 3, ..Default::default() };
        cfg.planner.d_plan = 0.25;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn modes_parse_by_name() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("adaptive".parse::<Mode>().is_err());
    }

    #[test]
    fn grid_env_is_selectable() {
        let cfg = RunConfig::from_toml_str("[env]\nkind = \"grid\"\nslip = 0.1").unwrap();
        assert!(matches!(cfg.env, EnvConfig::Grid(ref g) if g.slip == 0.1));
    }
}
