//! Safe model-based reinforcement learning.
//!
//! An implicit world model (latent dynamics plus reward, cost and value heads),
//! a maximum-entropy policy trained with an Augmented Lagrangian cost penalty,
//! a safe-improvement planner whose thresholds are derived from the policy's own
//! imagined trajectories, and a switching rule that executes whichever of the
//! plan or policy action the critics prefer.

pub mod decision;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numeric;
pub mod oracles;
pub mod planner;
pub mod representation;
pub mod safe_policy;
pub mod world_model;

pub use decision::Decision;
pub use envs::{AnyEnv, Env, EnvConfig, GridCmdp, PointHazardEnv, StepResult};
pub use error::{Error, Result};
pub use harness::{Agent, Checkpoint, Mode, RunConfig};
pub use planner::{CandidateSequence, PlanMode, PlannerConfig};
pub use representation::{BinSpec, LatentState};
pub use safe_policy::{LagrangianState, PolicyConfig, PolicyNet};
pub use world_model::{WorldModel, WorldModelConfig};
