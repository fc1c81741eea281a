//! Codecs shared by the world model's heads: SimNorm latent normalization,
//! the symmetric-log transform and two-hot discrete regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Matrix, Tape, Var};

/// Latent width and SimNorm group size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimNormSpec {
    pub width: usize,
    pub group: usize,
}

impl SimNormSpec {
    pub fn new(width: usize, group: usize) -> Result<Self> {
        let spec = Self { width, group };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group < 2 {
            return Err(Error::config(format!("SimNorm group size must be at least 2, got {}", self.group)));
        }
        if self.width == 0 || self.width % self.group != 0 {
            return Err(Error::config(format!(
                "SimNorm group size {} does not divide latent width {}",
                self.group, self.width
            )));
        }
        Ok(())
    }
}

/// A SimNorm-normalized latent vector: every group of `group` entries is a probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState(Vec<f64>);

impl LatentState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Wraps an already-normalized vector; the caller vouches for the invariant.
    pub(crate) fn from_normalized(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn to_row(&self) -> Matrix {
        Matrix::row_vector(&self.0)
    }
}

/// Per-group softmax of a raw latent vector.
pub fn simnorm(v: &[f64], spec: SimNormSpec) -> Result<LatentState> {
    spec.validate()?;
    if v.len() != spec.width {
        return Err(Error::config(format!("SimNorm expects width {}, got {}", spec.width, v.len())));
    }
    let mut out = v.to_vec();
    for chunk in out.chunks_mut(spec.group) {
        softmax_in_place(chunk);
    }
    Ok(LatentState(out))
}

/// `sign(x) · ln(1 + |x|)`.
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Inverse of [`symlog`]: `sign(y) · (exp(|y|) − 1)`.
pub fn symexp(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Uniform bins in symlog space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub count: usize,
    pub low: f64,
    pub high: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self { count: 101, low: -10.0, high: 10.0 }
    }
}

impl BinSpec {
    pub fn new(count: usize, low: f64, high: f64) -> Result<Self> {
        let spec = Self { count, low, high };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 3 || self.count % 2 == 0 {
            return Err(Error::config(format!("bin count must be odd and at least 3, got {}", self.count)));
        }
        if !(self.low < 0.0 && 0.0 < self.high) {
            return Err(Error::config(format!("bin bounds must satisfy low < 0 < high, got [{}, {}]", self.low, self.high)));
        }
        Ok(())
    }

    pub fn center(&self, i: usize) -> f64 {
        self.low + (i as f64) * (self.high - self.low) / ((self.count - 1) as f64)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }

    /// Bin centers as a `count x 1` column, for decoding batched probabilities.
    pub fn centers_column(&self) -> Matrix {
        Matrix::column(&self.centers())
    }
}

/// Two-hot encoding of `x`: `symlog(x)` clamped into range and split linearly
/// between the two nearest bin centers.
pub fn twohot_encode(x: f64, bins: &BinSpec) -> Vec<f64> {
    let mut out = vec![0.0; bins.count];
    twohot_encode_into(x, bins, &mut out);
    out
}

fn twohot_encode_into(x: f64, bins: &BinSpec, out: &mut [f64]) {
    out.fill(0.0);
    let y = symlog(x).clamp(bins.low, bins.high);
    let last = bins.count - 1;
    let pos = (y - bins.low) * (last as f64) / (bins.high - bins.low);
    let i = (pos.floor() as usize).min(last - 1);
    let frac = (pos - i as f64).clamp(0.0, 1.0);
    out[i] = 1.0 - frac;
    out[i + 1] += frac;
}

/// Two-hot targets for a batch of scalars, one row each.
pub fn twohot_batch(xs: &[f64], bins: &BinSpec) -> Matrix {
    let mut m = Matrix::zeros(xs.len(), bins.count);
    for (i, &x) in xs.iter().enumerate() {
        twohot_encode_into(x, bins, m.row_mut(i));
    }
    m
}

/// `symexp` of the probability-weighted mean bin center.
pub fn twohot_decode(p: &[f64], bins: &BinSpec) -> f64 {
    symexp(p.iter().zip(bins.centers()).map(|(pi, c)| pi * c).sum())
}

/// Decodes a row of logits (softmax first).
pub fn decode_logits(logits: &[f64], bins: &BinSpec) -> f64 {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    twohot_decode(&p, bins)
}

/// Decodes every row of a logits matrix.
pub fn decode_logits_batch(logits: &Matrix, bins: &BinSpec) -> Vec<f64> {
    logits.iter_rows().map(|r| decode_logits(r, bins)).collect()
}

/// Cross-entropy between `softmax(logits)` and the two-hot encoding of `target`.
pub fn discrete_ce(logits: &[f64], target: f64, bins: &BinSpec) -> Result<f64> {
    if logits.len() != bins.count {
        return Err(Error::config(format!("expected {} logits, got {}", bins.count, logits.len())));
    }
    let t = twohot_encode(target, bins);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(t.iter().zip(logits).map(|(&ti, &li)| -ti * (li - lse)).sum())
}

/// Gradient of [`discrete_ce`] with respect to the logits: `softmax(logits) − target`.
pub fn discrete_ce_grad(logits: &[f64], target: f64, bins: &BinSpec) -> Result<Vec<f64>> {
    if logits.len() != bins.count {
        return Err(Error::config(format!("expected {} logits, got {}", bins.count, logits.len())));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let t = twohot_encode(target, bins);
    Ok(p.iter().zip(&t).map(|(a, b)| a - b).collect())
}

/// Batched, differentiable [`discrete_ce`]: a `rows x 1` column of losses.
pub fn discrete_ce_tape(tape: &mut Tape, logits: Var, targets: &[f64], bins: &BinSpec) -> Var {
    tape.soft_cross_entropy(logits, &twohot_batch(targets, bins))
}

/// Batched, differentiable decode of logits to scalars: a `rows x 1` column.
pub fn decode_tape(tape: &mut Tape, logits: Var, bins: &BinSpec) -> Var {
    let p = tape.softmax(logits);
    let mean = tape.matmul_const(p, &bins.centers_column());
    tape.symexp(mean)
}

/// Shannon entropy of a probability vector (natural log, `0 ln 0 = 0`).
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}
