use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use crate::decision::{choose, Source};
use crate::error::{Error, Result};
use crate::numeric::Adam;
use crate::planner::{plan, shift_mean, PlannerConfig};
use crate::safe_policy::{penalty_update, policy_loss, LagrangianState, PolicyNet};
use crate::world_model::{ModelLossParts, SegmentBatch, WorldModel};

/// World model, policy and constraint state, plus the per-episode planner warm start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub model: WorldModel,
    pub policy: PolicyNet,
    policy_optimizer: Adam,
    pub lagrangian: LagrangianState,
    mode: Mode,
    planner: PlannerConfig,
    #[serde(skip)]
    warm_start: Option<Vec<f64>>,
}

/// What [`Agent::act`] executed and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub action: Vec<f64>,
    pub source: Source,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub model: ModelLossParts,
    pub policy_loss: f64,
    pub delta: f64,
    /// Multiplier and penalty after this update.
    pub lambda: f64,
    pub mu: f64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, obs_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let model = WorldModel::new(cfg.world_model.clone(), obs_dim, action_dim, rng)?;
        let policy = PolicyNet::new(cfg.world_model.latent_dim, action_dim, &cfg.policy, rng)?;
        let policy_optimizer = Adam::new(&policy.net().param_shapes(), cfg.policy.optimizer);
        let p = &cfg.policy;
        Ok(Self {
            model,
            policy,
            policy_optimizer,
            lagrangian: LagrangianState::new(p.budget, p.nu, p.mu_init, p.lambda_init)?,
            mode: cfg.mode,
            planner: cfg.planner_for_mode(),
            warm_start: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn planner_config(&self) -> &PlannerConfig {
        &self.planner
    }

    /// Forgets the planner warm start; call at every episode start.
    pub fn reset_episode(&mut self) {
        self.warm_start = None;
    }

    /// Chooses an action for `observation`. `explore` samples policy actions
    /// instead of taking the mean; planning is stochastic either way.
    pub fn act(&mut self, observation: &[f64], explore: bool, rng: &mut dyn RngCore) -> Result<Act> {
        let z = self.model.encode(observation)?;
        if self.mode == Mode::PolicyOnly {
            let (action, _) = self.policy.sample_action(&z, !explore, rng)?;
            return Ok(Act { action, source: Source::Policy });
        }
        let outcome = plan(z.as_slice(), self.warm_start.as_deref(), &self.planner, &self.model, &self.policy, rng)?;
        self.warm_start = Some(shift_mean(&outcome.mean, self.policy.action_dim()));
        if self.mode != Mode::Spowl {
            return Ok(Act { action: outcome.action, source: Source::Plan });
        }
        let decision = choose(z.as_slice(), &outcome.action, &self.policy, &self.model)?;
        let action = match decision.source {
            Source::Plan => decision.action,
            Source::Policy if explore => self.policy.sample_action(&z, false, rng)?.0,
            Source::Policy => decision.policy_action,
        };
        Ok(Act { action, source: decision.source })
    }

    /// One model step, one policy step, then the multiplier and penalty updates.
    pub fn update(&mut self, batch: &SegmentBatch, rng: &mut dyn RngCore) -> Result<UpdateStats> {
        let (model_parts, latents) = self.model.update(batch, &self.policy, rng)?;
        let penalized = self.mode.penalized();
        let loss = policy_loss(&latents, &self.policy, &self.model, &self.lagrangian, penalized, rng)?;
        self.policy_optimizer.step(&mut self.policy.net_mut().params_mut(), &loss.grads)?;
        if !self.policy.net().is_finite() {
            return Err(Error::training("policy parameters became non-finite"));
        }
        if penalized {
            self.lagrangian.lambda = loss.next_lambda;
            self.lagrangian = penalty_update(&self.lagrangian);
        }
        Ok(UpdateStats {
            model: model_parts,
            policy_loss: loss.total,
            delta: loss.delta,
            lambda: self.lagrangian.lambda,
            mu: self.lagrangian.mu,
        })
    }
}
