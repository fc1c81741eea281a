use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::{Activation, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `input x output`.
    pub weight: Matrix,
    /// `1 x output`.
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward network: a stack of affine layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Per-parameter gradients in [`DenseNet::params`] order (weight, bias per layer).
pub type NetGrads = Vec<Matrix>;

impl DenseNet {
    /// Builds a net from explicit layers, checking width chaining.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.output_width()) {
                return Err(Error::config(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if let Activation::SoftmaxGroup { group } = l.activation {
                if group < 2 || l.output_width() % group != 0 {
                    return Err(Error::config(format!(
                        "layer {i}: softmax group {group} does not divide width {}",
                        l.output_width()
                    )));
                }
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform fan-in initialization: every weight and bias drawn from `U(−1/√fan_in, 1/√fan_in)`.
    ///
    /// `widths` lists input, hidden and output widths; `hidden` is applied to every layer but
    /// the last, which uses `output`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("a network needs an input and an output width"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut draw = |len| (0..len).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
                let weight = Matrix::from_vec(fan_in, fan_out, draw(fan_in * fan_out));
                let bias = Matrix::from_vec(1, fan_out, draw(fan_out));
                Layer { weight, bias, activation: if i + 1 == n { output } else { hidden } }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Sets the final layer's weights and bias to zero (heads that should start at a neutral output).
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.as_mut_slice().fill(0.0);
        last.bias.as_mut_slice().fill(0.0);
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").output_width()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.shape()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Batched inference: one sample per row of `input`.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_width() {
            return Err(Error::config(format!(
                "network expects width {}, got {}",
                self.input_width(),
                input.cols()
            )));
        }
        let mut x = input.clone();
        for l in &self.layers {
            let mut out = Matrix::zeros(x.rows(), l.output_width());
            for i in 0..out.rows() {
                out.row_mut(i).copy_from_slice(l.bias.as_slice());
            }
            super::matrix::gemm(1.0, &x, false, &l.weight, false, 1.0, &mut out);
            x = l.activation.apply(&out);
        }
        Ok(x)
    }

    /// Registers the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        self.bind_with(tape, true)
    }

    /// Registers the parameters as constants: gradients still flow through the
    /// net into its input, but never into its parameters.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundNet {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()), l.activation)
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()), l.activation)
                }
            })
            .collect();
        BoundNet { vars, input_width: self.input_width() }
    }

    /// Exponential moving average toward `online`: `self ← (1−τ)·self + τ·online`.
    pub fn soft_update_from(&mut self, online: &DenseNet, tau: f64) {
        for (t, o) in self.params_mut().into_iter().zip(online.params()) {
            for (a, b) in t.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    /// All parameters flattened in [`DenseNet::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// A [`DenseNet`] whose parameters live on a tape for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct BoundNet {
    vars: Vec<(Var, Var, Activation)>,
    input_width: usize,
}

impl BoundNet {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        if tape.value(input).cols() != self.input_width {
            return Err(Error::config(format!(
                "network expects width {}, got {}",
                self.input_width,
                tape.value(input).cols()
            )));
        }
        let mut x = input;
        for &(w, b, act) in &self.vars {
            let pre = tape.linear(x, w, b);
            x = tape.activation(pre, act);
        }
        Ok(x)
    }

    /// Gradients in [`DenseNet::params`] order; zeros for parameters nothing flowed into.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> NetGrads {
        self.vars
            .iter()
            .flat_map(|&(w, b, _)| [w, b])
            .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
            .collect()
    }
}

/// Gradients of a scalar loss built from `net`'s output on `input`.
///
/// `loss` receives the tape and the output variable and returns the scalar loss variable.
pub fn gradients<F>(net: &DenseNet, input: &Matrix, loss: F) -> Result<NetGrads>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant(input.clone());
    let out = bound.forward(&mut tape, x)?;
    let root = loss(&mut tape, out)?;
    let value = tape.value(root);
    if value.shape() == (1, 1) && !value.item().is_finite() {
        return Err(Error::training(format!(
            "non-finite loss {} for a {}-parameter net on a {}x{} batch",
            value.item(),
            net.num_params(),
            input.rows(),
            input.cols()
        )));
    }
    let g = tape.backward(root)?;
    Ok(bound.grads(&tape, &g))
}
