use serde::{Deserialize, Serialize};

use super::Matrix;

/// Per-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Activation {
    Linear,
    Relu,
    /// `x · tanh(softplus(x))`; the hidden-layer default.
    Mish,
    Tanh,
    /// Softmax applied independently to consecutive groups of `group` entries.
    SoftmaxGroup { group: usize },
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `tanh(softplus(x))` and `sigmoid(x)` from one exponential:
/// with `n = e^x (e^x + 2)`, `tanh(softplus(x)) = n / (n + 2)`.
#[inline]
fn mish_parts(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

#[inline]
fn mish(x: f64) -> f64 {
    x * mish_parts(x).0
}

#[inline]
fn mish_grad(x: f64) -> f64 {
    let (t, s) = mish_parts(x);
    t + x * (1.0 - t * t) * s
}

/// In-place softmax of a slice, stabilized by the max entry.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Gradient of a softmax block given its output `s` and upstream gradient `g`.
fn softmax_backward(s: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &si), &gi) in out.iter_mut().zip(s).zip(g) {
        *o = si * (gi - dot);
    }
}

impl Activation {
    pub fn apply(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Linear => x.clone(),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Mish => x.map(mish),
            Activation::Tanh => x.map(f64::tanh),
            Activation::SoftmaxGroup { group } => {
                let mut out = x.clone();
                for chunk in out.as_mut_slice().chunks_mut(group) {
                    softmax_in_place(chunk);
                }
                out
            }
        }
    }

    /// Input gradient given the layer input `x`, its output `y` and the upstream gradient.
    pub fn backward(self, x: &Matrix, y: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Linear => upstream.clone(),
            Activation::Relu => x.zip_map(upstream, |v, g| if v > 0.0 { g } else { 0.0 }),
            Activation::Mish => x.zip_map(upstream, |v, g| mish_grad(v) * g),
            Activation::Tanh => y.zip_map(upstream, |t, g| (1.0 - t * t) * g),
            Activation::SoftmaxGroup { group } => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for ((s, g), o) in y
                    .as_slice()
                    .chunks(group)
                    .zip(upstream.as_slice().chunks(group))
                    .zip(out.as_mut_slice().chunks_mut(group))
                {
                    softmax_backward(s, g, o);
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mish_derivative_matches_central_difference() {
        for &x in &[-4.0, -1.3, -0.2, 0.0, 0.4, 2.5, 9.0] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((fd - mish_grad(x)).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn mish_matches_the_tanh_softplus_form() {
        for i in -800..=800 {
            let x = i as f64 * 0.05;
            let reference = x * softplus(x).tanh();
            assert!((mish(x) - reference).abs() <= 1e-14 * reference.abs().max(1e-300) + 1e-300, "x={x}");
        }
        assert_eq!(mish(-1000.0), 0.0);
        assert_eq!(mish_grad(50.0), 1.0);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }
}
