use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::OracleReport;
use crate::planner::{select_cce, select_elites, CandidateSequence, EliteSelection, Provenance};

pub const INSTANCES: usize = 10_000;

fn by_reward(a: &CandidateSequence, b: &CandidateSequence) -> Ordering {
    let key = |c: &CandidateSequence| (-c.value, c.cost);
    key(a).partial_cmp(&key(b)).unwrap().then_with(|| a.actions.partial_cmp(&b.actions).unwrap())
}

fn by_cost(a: &CandidateSequence, b: &CandidateSequence) -> Ordering {
    let key = |c: &CandidateSequence| (c.cost, -c.value);
    key(a).partial_cmp(&key(b)).unwrap().then_with(|| a.actions.partial_cmp(&b.actions).unwrap())
}

/// Filter, stable sort, truncate.
pub fn naive_select_elites(
    candidates: &[CandidateSequence],
    prior: &[CandidateSequence],
    d_r: f64,
    d_c: f64,
    k: usize,
) -> EliteSelection {
    let mut keep: Vec<CandidateSequence> = Vec::new();
    for c in candidates {
        if c.value >= d_r && c.cost <= d_c {
            keep.push(c.clone());
        }
    }
    if keep.is_empty() {
        return EliteSelection { elites: prior.to_vec(), fallback: true };
    }
    keep.sort_by(by_reward);
    keep.truncate(k.max(1));
    EliteSelection { elites: keep, fallback: false }
}

fn naive_select_cce(candidates: &[CandidateSequence], d_plan: f64, k: usize) -> EliteSelection {
    let mut keep: Vec<CandidateSequence> = candidates.iter().filter(|c| c.cost < d_plan).cloned().collect();
    let fallback = keep.is_empty();
    if fallback {
        keep = candidates.to_vec();
        keep.sort_by(by_cost);
    } else {
        keep.sort_by(by_reward);
    }
    keep.truncate(k.max(1));
    EliteSelection { elites: keep, fallback }
}

/// Coarse values so that ties in value, cost and actions are common.
fn candidate(rng: &mut ChaCha8Rng, provenance: Provenance) -> CandidateSequence {
    let actions = (0..4).map(|_| rng.random_range(-2..=2) as f64 * 0.5).collect();
    let mut c = CandidateSequence::new(actions, provenance);
    c.value = rng.random_range(-3..=3) as f64 * 0.5;
    c.cost = rng.random_range(0..=4) as f64 * 0.25;
    c
}

/// `select_elites` and `select_cce` against naive filter-and-stable-sort
/// selections on random instances; also checks that shuffling the input
/// leaves the selection unchanged.
pub fn select_elites_vs_naive() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe1);
    let (mut empty, mut within_k, mut beyond_k) = (0, 0, 0);
    let mut mismatches = Vec::new();
    for i in 0..INSTANCES {
        let n = rng.random_range(0..40);
        let k = rng.random_range(0..12);
        let mut candidates: Vec<CandidateSequence> = (0..n).map(|_| candidate(&mut rng, Provenance::Sampled)).collect();
        let prior: Vec<CandidateSequence> = (0..rng.random_range(1..6)).map(|_| candidate(&mut rng, Provenance::PolicyPrior)).collect();
        let d_r = rng.random_range(-3..=3) as f64 * 0.5;
        let d_c = rng.random_range(0..=4) as f64 * 0.25;

        let want = naive_select_elites(&candidates, &prior, d_r, d_c, k);
        let improving = candidates.iter().filter(|c| c.value >= d_r && c.cost <= d_c).count();
        match improving {
            0 => empty += 1,
            m if m <= k.max(1) => within_k += 1,
            _ => beyond_k += 1,
        }
        let got = select_elites(&candidates, &prior, d_r, d_c, k);
        if got != want {
            mismatches.push(format!("select_elites instance {i}"));
        }
        let cce_want = naive_select_cce(&candidates, d_c, k);
        if n > 0 && select_cce(&candidates, d_c, k) != cce_want {
            mismatches.push(format!("select_cce instance {i}"));
        }
        candidates.shuffle(&mut rng);
        if select_elites(&candidates, &prior, d_r, d_c, k) != want {
            mismatches.push(format!("shuffled instance {i}"));
        }
    }
    let covered = empty > 0 && within_k > 0 && beyond_k > 0;
    mismatches.truncate(5);
    let detail = format!(
        "{INSTANCES} instances: {empty} empty, {within_k} at most k, {beyond_k} above k{}",
        if mismatches.is_empty() { String::new() } else { format!("; first mismatches: {}", mismatches.join(", ")) }
    );
    OracleReport::new("select-elites", mismatches.is_empty() && covered, detail)
}
