use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 20.0 }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], config: AdamConfig) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<f64> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::config(format!(
                    "optimizer shape mismatch: state {:?}, param {:?}, grad {:?}",
                    m.shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let norm = grads.iter().map(Matrix::squared_norm).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::training(format!("non-finite gradient norm {norm}")));
        }
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig { lr, grad_clip: 0.0, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Matrix::row_vector(&[0.5, -1.0]);
        let mut opt = Adam::new(&[(1, 2)], cfg(0.1));
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p.as_slice(), &[0.5, -1.0]);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = Matrix::row_vector(&[0.0, 0.0]);
        let mut opt = Adam::new(&[(1, 2)], cfg(0.01));
        let g = Matrix::row_vector(&[2.0, -0.5]);
        let mut prev = p.clone();
        for _ in 0..100 {
            opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
            assert!(p[(0, 0)] < prev[(0, 0)]);
            assert!(p[(0, 1)] > prev[(0, 1)]);
            prev = p.clone();
        }
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1·1, v = 0.001·1; m̂ = 1, v̂ = 1; p = 0 − 0.1 · 1 / (1 + 1e-8)
        let mut p = Matrix::scalar(0.0);
        let mut opt = Adam::new(&[(1, 1)], cfg(0.1));
        opt.step(&mut [&mut p], &[Matrix::scalar(1.0)]).unwrap();
        assert!((p.item() - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut opt = Adam::new(&[(2, 2)], cfg(0.1));
        let err = opt.step(&mut [&mut p], &[Matrix::zeros(1, 2)]);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
