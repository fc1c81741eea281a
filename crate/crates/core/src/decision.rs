//! Plan/policy switching by critic comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::planner::{ActionPolicy, LatentModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Plan,
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Vec<f64>,
    pub source: Source,
    /// `Q_avg(z, a_plan)`.
    pub q_plan: f64,
    /// `Q_avg(z, π(z))`.
    pub q_policy: f64,
    /// `Q^c_avg(z, a_plan)`.
    pub qc_plan: f64,
    /// `Q^c_avg(z, π(z))`.
    pub qc_policy: f64,
    /// The deterministic policy action used in the comparison.
    pub policy_action: Vec<f64>,
}

/// The rule itself: plan iff it is at least as good in reward value and at
/// most as bad in cost value. Equality favors the plan.
pub fn prefers_plan(q_plan: f64, q_policy: f64, qc_plan: f64, qc_policy: f64) -> bool {
    q_plan >= q_policy && qc_plan <= qc_policy
}

/// Compares `a_plan` with the policy's mean action at `z` under the averaged
/// reward and cost critics and returns whichever the rule selects.
pub fn choose<M, P>(z: &[f64], a_plan: &[f64], policy: &P, model: &M) -> Result<Decision>
where
    M: LatentModel + ?Sized,
    P: ActionPolicy + ?Sized,
{
    if z.len() != model.latent_dim() || a_plan.len() != model.action_dim() {
        return Err(Error::config(format!(
            "choose expects a {}-wide latent and {}-D action, got {} and {}",
            model.latent_dim(),
            model.action_dim(),
            z.len(),
            a_plan.len()
        )));
    }
    let zz = Matrix::repeat_row(z, 2);
    let zrow = Matrix::row_vector(z);
    let pi = policy.mean_action(&zrow)?;
    let both = Matrix::concat_rows(&[&Matrix::row_vector(a_plan), &pi]);
    let q = model.value_avg(&zz, &both)?;
    let qc = model.cost_value_avg(&zz, &both)?;
    let plan = prefers_plan(q[0], q[1], qc[0], qc[1]);
    Ok(Decision {
        action: if plan { a_plan.to_vec() } else { pi.row(0).to_vec() },
        source: if plan { Source::Plan } else { Source::Policy },
        q_plan: q[0],
        q_policy: q[1],
        qc_plan: qc[0],
        qc_policy: qc[1],
        policy_action: pi.into_vec(),
    })
}
