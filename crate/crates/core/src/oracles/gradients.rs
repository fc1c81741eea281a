use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::OracleReport;
use crate::error::Result;
use crate::numeric::{gradients, Activation, DenseNet, Matrix, Tape, Var};
use crate::representation::BinSpec;
use crate::safe_policy::{delta, policy_loss, LagrangianState, PolicyConfig, PolicyNet};
use crate::world_model::{DecoderConfig, Segment, SegmentBatch, TdTargets, ValueMode, WorldModel, WorldModelConfig};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor for the relative error, so vanishing gradients are
/// compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-5;

const OBS_DIM: usize = 6;
const ACTION_DIM: usize = 2;
const BATCH: usize = 3;

/// Worst central-difference disagreement for one loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FdCheck {
    pub label: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl FdCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

/// Compares `analytic` with central differences of `loss` around `x0`,
/// one coordinate at a time.
pub fn check_gradient(label: &str, x0: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> Result<f64>) -> Result<FdCheck> {
    assert_eq!(x0.len(), analytic.len(), "{label}: gradient length");
    let mut x = x0.to_vec();
    let mut check = FdCheck { label: label.to_string(), params: x0.len(), max_rel_error: 0.0, worst_index: 0 };
    for i in 0..x.len() {
        x[i] = x0[i] + FD_STEP;
        let up = loss(&x)?;
        x[i] = x0[i] - FD_STEP;
        let down = loss(&x)?;
        x[i] = x0[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        if !(rel <= check.max_rel_error) {
            check.max_rel_error = rel;
            check.worst_index = i;
        }
    }
    Ok(check)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn randomize(net: &mut DenseNet, rng: &mut ChaCha8Rng) -> Result<()> {
    let p = normal_vec(rng, net.num_params(), 0.5);
    net.set_flat_params(&p)
}

fn flatten(ms: &[Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

fn model_params(model: &WorldModel) -> Vec<f64> {
    model.online_nets().iter().flat_map(|n| n.flat_params()).collect()
}

fn set_model_params(model: &mut WorldModel, x: &[f64]) -> Result<()> {
    let mut offset = 0;
    for net in model.online_nets_mut() {
        let n = net.num_params();
        net.set_flat_params(&x[offset..offset + n])?;
        offset += n;
    }
    Ok(())
}

fn tiny_model(decoder: bool, policy_value: ValueMode, rng: &mut ChaCha8Rng) -> Result<WorldModel> {
    let cfg = WorldModelConfig {
        latent_dim: 4,
        simnorm_group: 2,
        hidden_dim: 6,
        hidden_layers: 1,
        num_q: 2,
        q_subsample: 2,
        num_cost: 2,
        num_cost_value: 2,
        bins: BinSpec { count: 7, low: -3.0, high: 3.0 },
        horizon: 2,
        policy_value,
        decoder: DecoderConfig { enabled: decoder, weight: 0.5, ..DecoderConfig::default() },
        ..WorldModelConfig::default()
    };
    let mut model = WorldModel::new(cfg, OBS_DIM, ACTION_DIM, rng)?;
    for net in model.online_nets_mut() {
        randomize(net, rng)?;
    }
    Ok(model)
}

fn random_batch(rng: &mut ChaCha8Rng, steps: usize) -> Result<SegmentBatch> {
    let segments: Vec<Segment> = (0..BATCH)
        .map(|_| {
            let obs: Vec<Vec<f64>> = (0..=steps).map(|_| normal_vec(rng, OBS_DIM, 1.0)).collect();
            Segment {
                observations: obs[..steps].to_vec(),
                actions: (0..steps).map(|_| (0..ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                rewards: normal_vec(rng, steps, 1.0),
                costs: (0..steps).map(|_| rng.random_range(0.0..1.0)).collect(),
                next_observations: obs[1..].to_vec(),
                terminated: vec![false; steps],
            }
        })
        .collect();
    SegmentBatch::from_segments(&segments)
}

fn tiny_policy(rng: &mut ChaCha8Rng) -> Result<PolicyNet> {
    let cfg = PolicyConfig { hidden_dim: 6, hidden_layers: 1, ..PolicyConfig::default() };
    let mut policy = PolicyNet::new(4, ACTION_DIM, &cfg, rng)?;
    randomize(policy.net_mut(), rng)?;
    Ok(policy)
}

fn net_check(rng: &mut ChaCha8Rng) -> Result<FdCheck> {
    let mut net = DenseNet::new(&[3, 5, 5, 4], Activation::Mish, Activation::Tanh, rng)?;
    randomize(&mut net, rng)?;
    let input = Matrix::from_vec(4, 3, normal_vec(rng, 12, 1.0));
    let loss_fn = |tape: &mut Tape, out: Var| {
        let sq = tape.square(out);
        let rows = tape.sum_cols(sq);
        Ok(tape.mean(rows))
    };
    let analytic = flatten(&gradients(&net, &input, loss_fn)?);
    let x0 = net.flat_params();
    let mut probe = net.clone();
    check_gradient("dense net", &x0, &analytic, |x| {
        probe.set_flat_params(x)?;
        let out = probe.forward(&input)?;
        Ok(out.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / out.rows() as f64)
    })
}

struct Fixture {
    model: WorldModel,
    batch: SegmentBatch,
    targets: TdTargets,
}

fn fixture(decoder: bool, policy_value: ValueMode, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let model = tiny_model(decoder, policy_value, rng)?;
    let batch = random_batch(rng, model.config().horizon + 1)?;
    let policy = tiny_policy(rng)?;
    let targets = model.td_targets(&batch, &policy, rng)?;
    Ok(Fixture { model, batch, targets })
}

fn model_check(label: &str, f: &Fixture) -> Result<FdCheck> {
    let analytic = flatten(&f.model.model_loss(&f.batch, &f.targets)?.grads);
    let x0 = model_params(&f.model);
    let mut probe = f.model.clone();
    check_gradient(label, &x0, &analytic, |x| {
        set_model_params(&mut probe, x)?;
        Ok(probe.model_loss(&f.batch, &f.targets)?.parts.total)
    })
}

/// Checks the composite policy objective; `offset` places the budget that far
/// below the measured mean cost value, so `Δ = offset` at the start point.
fn policy_check(label: &str, f: &Fixture, offset: f64, lambda: f64, expect_active: bool, rng: &mut ChaCha8Rng) -> Result<FdCheck> {
    let latents = f.model.model_loss(&f.batch, &f.targets)?.latents;
    let policy = tiny_policy(rng)?;
    let mean_cost = delta(&latents, &policy, &f.model, 0.0)?;
    let state = LagrangianState::new(mean_cost - offset, 0.5, 1.0, lambda)?;
    let noise = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let loss = policy_loss(&latents, &policy, &f.model, &state, true, &mut noise.clone())?;
    let active = loss.next_lambda > 0.0;
    if active != expect_active {
        return Err(crate::Error::config(format!(
            "{label}: expected the {} branch, got next_lambda {}",
            if expect_active { "active" } else { "inactive" },
            loss.next_lambda
        )));
    }
    let analytic = flatten(&loss.grads);
    let x0 = policy.net().flat_params();
    let mut probe = policy.clone();
    check_gradient(label, &x0, &analytic, |x| {
        probe.net_mut().set_flat_params(x)?;
        Ok(policy_loss(&latents, &probe, &f.model, &state, true, &mut noise.clone())?.total)
    })
}

/// Every gradient the trainer uses, against central differences on nets with
/// fewer than a thousand parameters.
pub fn fd_checks() -> Result<Vec<FdCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let plain = fixture(false, ValueMode::MinSubsample, &mut rng)?;
    let with_decoder = fixture(true, ValueMode::MinSubsample, &mut rng)?;
    let averaged = fixture(false, ValueMode::Avg, &mut rng)?;
    Ok(vec![
        net_check(&mut rng)?,
        model_check("model loss", &plain)?,
        model_check("model loss with decoder", &with_decoder)?,
        policy_check("policy loss, active penalty", &plain, 0.5, 0.2, true, &mut rng)?,
        policy_check("policy loss, inactive penalty", &plain, -2.0, 0.5, false, &mut rng)?,
        policy_check("policy loss, averaged critic", &averaged, 0.5, 0.2, true, &mut rng)?,
    ])
}

pub fn finite_differences() -> OracleReport {
    const NAME: &str = "finite-differences";
    match fd_checks() {
        Ok(checks) => {
            let passed = checks.iter().all(FdCheck::passed) && checks.iter().all(|c| c.params <= 1000);
            let detail = checks
                .iter()
                .map(|c| format!("{} [{} params] max rel {:.2e}", c.label, c.params, c.max_rel_error))
                .collect::<Vec<_>>()
                .join("; ");
            OracleReport::new(NAME, passed, detail)
        }
        Err(e) => OracleReport::failed(NAME, e),
    }
}
