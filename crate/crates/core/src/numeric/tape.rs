//! Reverse-mode gradient tape over batched matrices.
//!
//! Every operation appends a node holding its value. `Tape::backward` walks the
//! nodes in reverse and accumulates gradients only along edges that lead to a
//! leaf created with [`Tape::param`]. Constants and [`Tape::detach`]ed values
//! are zero-flow edges, which is how stop-gradient targets are expressed.

use super::activation::{softmax_in_place, softplus, Activation};
use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Act { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Square(Var),
    Symexp(Var),
    LogOneMinusTanhSq(Var),
    Min(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SumCols(Var),
    Mean(Var),
    Softmax(Var),
    MatMulConst { x: Var, m: Matrix },
    SoftCrossEntropy { logits: Var, probs: Matrix, targets: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: copies the value into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x · w + b`, with `b` a `1 x out` row broadcast over the batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols(), wv.rows(), "linear: input width {} vs weight rows {}", xv.cols(), wv.rows());
        assert_eq!(bv.shape(), (1, wv.cols()), "linear: bias shape");
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        for i in 0..out.rows() {
            out.row_mut(i).copy_from_slice(bv.as_slice());
        }
        gemm(1.0, xv, false, wv, false, 1.0, &mut out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Linear {
            return x;
        }
        let out = act.apply(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Act { x, act }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Elementwise `sign(x)·(exp(|x|) − 1)`.
    pub fn symexp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::representation::symexp);
        let ng = self.needs(a);
        self.push(out, Op::Symexp(a), ng)
    }

    /// Elementwise `ln(1 − tanh(x)²)`, evaluated stably as `2(ln 2 − x − softplus(−2x))`.
    pub fn log_one_minus_tanh_sq(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x)));
        let ng = self.needs(a);
        self.push(out, Op::LogOneMinusTanhSq(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::min);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Min(a, b), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&mats);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_cols();
        let ng = self.needs(x);
        self.push(out, Op::SumCols(x), ng)
    }

    /// Mean of all entries as a `1 x 1` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for chunk in out.as_mut_slice().chunks_mut(cols.max(1)) {
            softmax_in_place(chunk);
        }
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// `x · m` for a constant matrix `m`.
    pub fn matmul_const(&mut self, x: Var, m: &Matrix) -> Var {
        let out = self.value(x).matmul(m);
        let ng = self.needs(x);
        self.push(out, Op::MatMulConst { x, m: m.clone() }, ng)
    }

    /// Per-row cross-entropy `−Σ_k t_k ln softmax(l)_k` against constant target rows.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Matrix) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "cross-entropy target shape");
        let mut probs = lv.clone();
        let mut out = Matrix::zeros(lv.rows(), 1);
        for i in 0..lv.rows() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            out[(i, 0)] = targets.row(i).iter().zip(row).map(|(&t, &l)| -t * (l - lse)).sum();
            softmax_in_place(probs.row_mut(i));
        }
        let ng = self.needs(logits);
        self.push(out, Op::SoftCrossEntropy { logits, probs, targets: targets.clone() }, ng)
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::config(format!("backward root must be a scalar, got {:?}", rv.shape())));
        }
        if !rv.item().is_finite() {
            return Err(Error::training(format!("non-finite loss {}", rv.item())));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    // leaves keep their gradient for the caller
                    grads[idx] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    if self.needs(*x) {
                        let wv = self.value(*w);
                        let mut gx = Matrix::zeros(g.rows(), wv.rows());
                        gemm(1.0, &g, false, wv, true, 0.0, &mut gx);
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let xv = self.value(*x);
                        let mut gw = Matrix::zeros(xv.cols(), g.cols());
                        gemm(1.0, xv, true, &g, false, 0.0, &mut gw);
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.sum_rows());
                    }
                }
                Op::Act { x, act } => {
                    let gx = act.backward(self.value(*x), &node.value, &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |u, v| u * v));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |u, v| u * v));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(&node.value, |u, y| u * y)),
                Op::Square(a) => accumulate(&mut grads, *a, g.zip_map(self.value(*a), |u, x| 2.0 * u * x)),
                Op::Symexp(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |u, x| u * x.abs().exp()))
                }
                Op::LogOneMinusTanhSq(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |u, x| -2.0 * x.tanh() * u))
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mask_a = av.zip_map(bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(&mask_a, |u, m| u * m));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.zip_map(&mask_a, |u, m| u * (1.0 - m)));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs(*p) {
                            accumulate(&mut grads, *p, g.slice_cols(start, w));
                        }
                        start += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        gx.row_mut(i).fill(g[(i, 0)]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let n = xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.item() / n));
                }
                Op::Softmax(x) => {
                    let gx = Activation::SoftmaxGroup { group: node.value.cols().max(1) }.backward(
                        self.value(*x),
                        &node.value,
                        &g,
                    );
                    accumulate(&mut grads, *x, gx);
                }
                Op::MatMulConst { x, m } => {
                    let mut gx = Matrix::zeros(g.rows(), m.rows());
                    gemm(1.0, &g, false, m, true, 0.0, &mut gx);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftCrossEntropy { logits, probs, targets } => {
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for i in 0..probs.rows() {
                        let tsum: f64 = targets.row(i).iter().sum();
                        let u = g[(i, 0)];
                        for ((o, &p), &t) in gl.row_mut(i).iter_mut().zip(probs.row(i)).zip(targets.row(i)) {
                            *o = u * (p * tsum - t);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_branch_carries_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        let d = tape.detach(p);
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn non_finite_root_is_a_training_error() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::scalar(f64::NAN));
        let loss = tape.scale(p, 2.0);
        assert!(matches!(tape.backward(loss), Err(Error::Training(_))));
    }

    #[test]
    fn min_routes_gradient_to_smaller_operand() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::row_vector(&[1.0, 5.0]));
        let b = tape.param(Matrix::row_vector(&[3.0, 2.0]));
        let m = tape.min(a, b);
        let s = tape.sum_cols(m);
        let loss = tape.mean(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(g.get(b).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn soft_cross_entropy_gradient_is_softmax_minus_target() {
        let mut tape = Tape::new();
        let logits = tape.param(Matrix::row_vector(&[0.3, -1.0, 2.0]));
        let target = Matrix::row_vector(&[0.0, 0.25, 0.75]);
        let ce = tape.soft_cross_entropy(logits, &target);
        let loss = tape.mean(ce);
        let g = tape.backward(loss).unwrap();
        let mut p = vec![0.3, -1.0, 2.0];
        softmax_in_place(&mut p);
        for ((gi, pi), ti) in g.get(logits).unwrap().as_slice().iter().zip(&p).zip(target.as_slice()) {
            assert!((gi - (pi - ti)).abs() < 1e-12);
        }
    }
}
