use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::OracleReport;
use crate::representation::{simnorm, symexp, symlog, twohot_decode, twohot_encode, BinSpec, SimNormSpec};

pub const GRID_POINTS: usize = 1000;

fn linspace(low: f64, high: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| low + (high - low) * i as f64 / (n - 1) as f64)
}

/// Largest deviation of each SimNorm group sum from one, over random inputs
/// spanning several orders of magnitude.
fn simnorm_group_error(rng: &mut ChaCha8Rng) -> f64 {
    let spec = SimNormSpec { width: 32, group: 8 };
    let mut worst = 0.0f64;
    for i in 0..GRID_POINTS {
        let scale = 10f64.powf(-2.0 + 5.0 * i as f64 / GRID_POINTS as f64);
        let v: Vec<f64> = (0..spec.width).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let z = simnorm(&v, spec).expect("valid spec");
        for g in z.as_slice().chunks(spec.group) {
            if g.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return f64::INFINITY;
            }
            worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// Two-hot round trip inside the bin range; also checks each encoding is a
/// distribution with at most two adjacent non-zero entries.
fn twohot_error(bins: &BinSpec) -> f64 {
    let span = symexp(bins.high);
    let mut worst = 0.0f64;
    for x in linspace(-span, span, GRID_POINTS) {
        let p = twohot_encode(x, bins);
        let nz: Vec<usize> = (0..p.len()).filter(|&i| p[i] != 0.0).collect();
        if nz.is_empty() || nz.len() > 2 || (nz.len() == 2 && nz[1] != nz[0] + 1) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return f64::INFINITY;
        }
        let back = twohot_decode(&p, bins);
        worst = worst.max((back - x).abs() / x.abs().max(1.0));
    }
    worst
}

/// Out-of-range values decode to the nearest representable end.
fn twohot_clamp_error(bins: &BinSpec) -> f64 {
    let (lo, hi) = (symexp(bins.low), symexp(bins.high));
    linspace(1.0, 1e6, GRID_POINTS)
        .flat_map(|d| [(hi + d, hi), (lo - d, lo)])
        .map(|(x, want)| (twohot_decode(&twohot_encode(x, bins), bins) - want).abs() / want.abs())
        .fold(0.0, f64::max)
}

fn symlog_error() -> f64 {
    linspace(-12.0, 12.0, GRID_POINTS)
        .map(|e| e.signum() * (10f64.powf(e.abs()) - 1.0))
        .map(|x| {
            let round = symexp(symlog(x));
            let monotone_ok = symlog(x).signum() == x.signum() || x == 0.0;
            if monotone_ok {
                (round - x).abs() / x.abs().max(1.0)
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// SimNorm group sums, two-hot round trips and the symlog inverse over grids
/// of a thousand points.
pub fn codec_round_trips() -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0dec);
    let bins = BinSpec::default();
    let fine = BinSpec { count: 255, low: -10.0, high: 10.0 };
    let simnorm_err = simnorm_group_error(&mut rng);
    let twohot_err = twohot_error(&bins).max(twohot_error(&fine));
    let clamp_err = twohot_clamp_error(&bins);
    let symlog_err = symlog_error();
    let passed = simnorm_err <= 1e-12 && twohot_err <= 1e-9 && clamp_err <= 1e-9 && symlog_err <= 1e-12;
    let detail = format!(
        "simnorm group sum {simnorm_err:.1e}, two-hot round trip {twohot_err:.1e}, clamp {clamp_err:.1e}, symlog inverse {symlog_err:.1e}"
    );
    OracleReport::new("codecs", passed, detail)
}
