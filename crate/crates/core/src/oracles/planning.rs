use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::OracleReport;
use crate::envs::{GridAction, GridCmdp, GridCmdpConfig, GridPolicy, GridValues};
use crate::error::Result;
use crate::planner::{plan, PlanMode, PlannerConfig};

/// Tolerance on `J`, relative to the optimum's magnitude.
pub const PLANNER_TOLERANCE: f64 = 0.05;
const GAMMA: f64 = 0.9;
/// Slack on feasibility comparisons between two routes to the same sum.
const FEASIBILITY_SLACK: f64 = 1e-9;

/// `(J, J_c)` of a discrete two-step sequence from cell `s0`, computed from
/// the transition rows and the cell tables, with the bootstrap action being
/// the policy mode at the most probable final cell.
fn sequence_value(env: &GridCmdp, values: &GridValues, policy: &GridPolicy, s0: usize, seq: [GridAction; 2]) -> (f64, f64) {
    let n = env.num_states();
    let cfg = env.config();
    let mut p = vec![0.0; n];
    p[s0] = 1.0;
    let (mut j, mut jc) = (0.0, 0.0);
    for (t, &a) in seq.iter().enumerate() {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if p[s] == 0.0 {
                continue;
            }
            for (s2, q) in env.transition_probs(s, a).into_iter().enumerate() {
                next[s2] += p[s] * q;
            }
        }
        let landed_r: f64 = next.iter().zip(&cfg.rewards).map(|(p, r)| p * r).sum();
        let landed_c: f64 = next.iter().zip(&cfg.costs).map(|(p, c)| p * c).sum();
        j += GAMMA.powi(t as i32) * landed_r;
        jc += GAMMA.powi(t as i32) * landed_c;
        p = next;
    }
    let mut argmax = 0;
    for s in 1..n {
        if p[s] > p[argmax] {
            argmax = s;
        }
    }
    let boot = policy.mode(argmax).index();
    j += GAMMA * GAMMA * (0..n).map(|s| p[s] * values.q[s][boot]).sum::<f64>();
    jc += GAMMA * GAMMA * (0..n).map(|s| p[s] * values.q_c[s][boot]).sum::<f64>();
    (j, jc)
}

fn all_sequences() -> Vec<[GridAction; 2]> {
    GridAction::ALL.iter().flat_map(|&a| GridAction::ALL.iter().map(move |&b| [a, b])).collect()
}

struct StartResult {
    optimum: Option<f64>,
    chosen: f64,
    fallback: bool,
}

fn check_start(env: &GridCmdp, policy: &GridPolicy, s0: usize, seed: u64) -> Result<StartResult> {
    let model = env.exact_model(policy, GAMMA, GAMMA)?;
    let cfg = PlannerConfig {
        horizon: 2,
        iterations: 6,
        samples: 512,
        prior: 64,
        elites: 16,
        mode: PlanMode::Adaptive,
        ..PlannerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = plan(&model.latent(s0).into_vec(), None, &cfg, &model, policy, &mut rng)?;
    let (d_r, d_c) = outcome.thresholds.expect("adaptive planning reports thresholds");
    let values = model.values();
    let optimum = all_sequences()
        .into_iter()
        .map(|seq| sequence_value(env, values, policy, s0, seq))
        .filter(|&(j, jc)| jc <= d_c + FEASIBILITY_SLACK && j >= d_r - FEASIBILITY_SLACK)
        .map(|(j, _)| j)
        .fold(None, |best: Option<f64>, j| Some(best.map_or(j, |b| b.max(j))));
    let chosen_seq = [GridAction::nearest(outcome.chosen.step(0, 2)), GridAction::nearest(outcome.chosen.step(1, 2))];
    let (chosen, _) = sequence_value(env, values, policy, s0, chosen_seq);
    Ok(StartResult { optimum, chosen, fallback: outcome.fallback })
}

/// Plans with the exact model of a random slippery grid from every cell and
/// compares the chosen sequence with the best of all 25 discrete sequences
/// that satisfy the planner's own thresholds. When no such sequence exists
/// the planner must report a fallback instead.
pub fn planner_vs_exhaustive() -> OracleReport {
    const NAME: &str = "planner-exhaustive";
    let run = || -> Result<(usize, usize, f64, Vec<String>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x91a);
        let env = GridCmdp::new(GridCmdpConfig::random(5, 5, 0.1, 0.3, &mut rng))?;
        let policy = GridPolicy::random(env.num_states(), &mut rng);
        let (mut compared, mut fallbacks, mut worst) = (0, 0, 0.0f64);
        let mut failures = Vec::new();
        for s0 in 0..env.num_states() {
            let r = check_start(&env, &policy, s0, 1000 + s0 as u64)?;
            match r.optimum {
                Some(best) => {
                    compared += 1;
                    let shortfall = (best - r.chosen) / best.abs().max(f64::MIN_POSITIVE);
                    worst = worst.max(shortfall);
                    if r.fallback || r.chosen < best - PLANNER_TOLERANCE * best.abs() {
                        failures.push(format!("cell {s0}: J {:.4} vs optimum {best:.4} (fallback {})", r.chosen, r.fallback));
                    }
                }
                None => {
                    fallbacks += 1;
                    if !r.fallback {
                        failures.push(format!("cell {s0}: no sequence meets the thresholds but no fallback"));
                    }
                }
            }
        }
        Ok((compared, fallbacks, worst, failures))
    };
    match run() {
        Ok((compared, fallbacks, worst, failures)) => {
            let detail = format!(
                "{compared} start cells compared, worst relative shortfall {worst:.4}, {fallbacks} expected fallbacks{}",
                if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
            );
            OracleReport::new(NAME, failures.is_empty() && compared > 0, detail)
        }
        Err(e) => OracleReport::failed(NAME, e),
    }
}
