use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::OracleReport;
use crate::error::Result;
use crate::representation::{symexp, BinSpec};
use crate::safe_policy::{PolicyConfig, PolicyNet};
use crate::world_model::{CostAggregation, Segment, SegmentBatch, WorldModel, WorldModelConfig};

/// Bins the three target heads put all their mass on: fixed, distinct values.
const HEAD_BINS: [usize; 3] = [55, 60, 65];
const PEAK_LOGIT: f64 = 60.0;

fn synthetic_targets(aggregation: CostAggregation, batch: &SegmentBatch) -> Result<Vec<Vec<f64>>> {
    let cfg = WorldModelConfig {
        latent_dim: 8,
        simnorm_group: 4,
        hidden_dim: 8,
        hidden_layers: 1,
        num_cost_value: HEAD_BINS.len(),
        cost_target: aggregation,
        horizon: batch.steps() - 1,
        ..WorldModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = WorldModel::new(cfg, batch.obs[0].cols(), batch.actions[0].cols(), &mut rng)?;
    let count = model.config().bins.count;
    let (_, cost_heads) = model.target_heads_mut();
    for (head, &bin) in cost_heads.iter_mut().zip(&HEAD_BINS) {
        let mut flat = vec![0.0; head.num_params()];
        let start = flat.len() - count;
        flat[start + bin] = PEAK_LOGIT;
        head.set_flat_params(&flat)?;
    }
    let policy = PolicyNet::new(8, batch.actions[0].cols(), &PolicyConfig::default(), &mut rng)?;
    Ok(model.td_targets(batch, &policy, &mut rng)?.qc)
}

fn batch(rng: &mut ChaCha8Rng) -> Result<SegmentBatch> {
    let segments: Vec<Segment> = (0..4)
        .map(|_| {
            let obs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            Segment {
                observations: obs[..2].to_vec(),
                actions: (0..2).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
                rewards: vec![0.0; 2],
                costs: (0..2).map(|_| rng.random_range(0.0..1.0)).collect(),
                next_observations: obs[1..].to_vec(),
                terminated: vec![false; 2],
            }
        })
        .collect();
    SegmentBatch::from_segments(&segments)
}

/// Cost TD targets from a target ensemble whose heads predict fixed, spread
/// values: the `min` aggregation must land strictly below `avg` and `max`
/// strictly above, and each must match `c + γ_c · agg(head values)`.
pub fn ensemble_cost_targets() -> OracleReport {
    const NAME: &str = "ensemble-cost-targets";
    let run = || -> Result<(bool, f64, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0xe5);
        let batch = batch(&mut rng)?;
        let min = synthetic_targets(CostAggregation::Min, &batch)?;
        let avg = synthetic_targets(CostAggregation::Avg, &batch)?;
        let max = synthetic_targets(CostAggregation::Max, &batch)?;
        let bins = BinSpec::default();
        let heads: Vec<f64> = HEAD_BINS.iter().map(|&i| symexp(bins.center(i))).collect();
        let gamma_c = WorldModelConfig::default().gamma_c;
        let hand = |agg: CostAggregation, c: f64| c + gamma_c * agg.apply(&heads);
        let mut ordered = true;
        let mut worst = 0.0f64;
        for t in 0..batch.steps() {
            for i in 0..batch.batch_size() {
                let c = batch.costs[t][i];
                ordered &= min[t][i] < avg[t][i] && avg[t][i] < max[t][i];
                for (got, agg) in [(min[t][i], CostAggregation::Min), (avg[t][i], CostAggregation::Avg), (max[t][i], CostAggregation::Max)] {
                    worst = worst.max((got - hand(agg, c)).abs());
                }
            }
        }
        Ok((ordered, worst, min[0][0], max[0][0]))
    };
    match run() {
        Ok((ordered, worst, lo, hi)) => OracleReport::new(
            NAME,
            ordered && worst <= 1e-9,
            format!("min < avg < max on every row: {ordered}; largest deviation from hand targets {worst:.1e}; first row spans [{lo:.4}, {hi:.4}]"),
        ),
        Err(e) => OracleReport::failed(NAME, e),
    }
}
