//! Reverse-mode gradient tape over [`Matrix`] values.
//!
//! Each primitive appends one node holding its output and whatever it needs
//! for the backward pass. Leaves are either trainable parameters (registered
//! in order) or frozen constants, which may be borrowed so large frozen
//! matrices are never copied per step. [`GradTape::backward`] walks the nodes
//! in reverse and returns one gradient per parameter, shaped like it.
//!
//! A tape is single-use and single-threaded: build it for one forward pass,
//! call `backward` once, drop it.

use std::borrow::Cow;

use super::matrix::{self, dot, LayerNormCache, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RowSoftmax(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    CosineRows {
        a: Var,
        b: Var,
        a_unit: Matrix,
        a_norms: Vec<f64>,
        b_unit: Matrix,
        b_norms: Vec<f64>,
    },
    ColSlice(Var, usize),
    HConcat(Vec<Var>),
    Reshape(Var),
    SumSquares(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        scale: f64,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<Var>,
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable leaf. Gradients come back in registration order.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(Cow::Owned(value), Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.derived(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// `a` plus the `1 × cols` row `row` broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        Ok(self.derived(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        let out = matrix::row_softmax(self.value(a), scale)?;
        Ok(self.derived(out, Op::RowSoftmax(a, scale), &[a]))
    }

    /// Layer norm with `gamma`/`beta` given as `1 × cols` nodes.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.rows() != 1 || b.rows() != 1 {
            return Err(Error::shape("layer_norm", g.shape(), b.shape()));
        }
        let (out, cache) = matrix::layer_norm_with_cache(self.value(x), g.data(), b.data(), eps)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("cosine_rows", av.shape(), bv.shape()));
        }
        let (a_unit, a_norms) = matrix::unit_rows(av, "lhs")?;
        let (b_unit, b_norms) = matrix::unit_rows(bv, "rhs")?;
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                out.set(i, j, dot(a_unit.row(i), b_unit.row(j)));
            }
        }
        Ok(self.derived(
            out,
            Op::CosineRows {
                a,
                b,
                a_unit,
                a_norms,
                b_unit,
                b_norms,
            },
            &[a, b],
        ))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).col_slice(start, len)?;
        Ok(self.derived(out, Op::ColSlice(a, start), &[a]))
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hconcat(&mats)?;
        Ok(self.derived(out, Op::HConcat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// Sum of squared entries, as a `1 × 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.derived(Matrix::row_vector(vec![s]), Op::SumSquares(a), &[a])
    }

    /// Mean over rows of `-log softmax(row / scale)[label]`, as a `1 × 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || labels.is_empty() {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= lv.cols()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Param(format!("softmax scale must be > 0, got {scale}")));
        }
        let mut loss = 0.0;
        for (r, &y) in lv.iter_rows().zip(labels) {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = r.iter().map(|v| ((v - max) / scale).exp()).sum::<f64>().ln();
            loss -= (r[y] - max) / scale - lse;
        }
        loss /= labels.len() as f64;
        let probs = matrix::row_softmax(lv, scale)?;
        Ok(self.derived(
            Matrix::row_vector(vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                scale,
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from the scalar node `loss` and returns one gradient
    /// per registered parameter, in registration order.
    pub fn backward(&self, loss: Var) -> Result<Vec<Matrix>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", lv.shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(self
            .params
            .iter()
            .map(|p| {
                grads[p.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(self.value(*p).rows(), self.value(*p).cols()))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => {
                if acc.shape() != g.shape() {
                    return Err(Error::shape("accumulate", acc.shape(), g.shape()));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let da = matrix::matmul(g, &self.value(*b).transpose())?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.wants(*b) {
                    let db = matrix::matmul(&self.value(*a).transpose(), g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *row, g.col_sums())?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::RowSoftmax(a, scale) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gr) = (out.row(i), g.row(i));
                    let s = dot(y, gr);
                    for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                        *dv = y[j] * (gr[j] - s) / scale;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let gam = self.value(*gamma).data();
                let cols = out.cols();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = Matrix::zeros(out.rows(), cols);
                for i in 0..out.rows() {
                    let (h, gr) = (cache.normed.row(i), g.row(i));
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..cols {
                        dgamma[j] += gr[j] * h[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    let s = cache.inv_std[i];
                    for (j, dv) in dx.row_mut(i).iter_mut().enumerate() {
                        let dh = gr[j] * gam[j];
                        *dv = s * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, Matrix::row_vector(dgamma))?;
                self.accumulate(grads, *beta, Matrix::row_vector(dbeta))?;
            }
            Op::CosineRows {
                a,
                b,
                a_unit,
                a_norms,
                b_unit,
                b_norms,
            } => {
                if self.wants(*a) {
                    let mut da = Matrix::zeros(a_unit.rows(), a_unit.cols());
                    for i in 0..a_unit.rows() {
                        let ai = a_unit.row(i);
                        let row = da.row_mut(i);
                        for j in 0..b_unit.rows() {
                            let (gij, cij, bj) = (g.get(i, j), out.get(i, j), b_unit.row(j));
                            for k in 0..row.len() {
                                row[k] += gij * (bj[k] - cij * ai[k]);
                            }
                        }
                        for v in row.iter_mut() {
                            *v /= a_norms[i];
                        }
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(b_unit.rows(), b_unit.cols());
                    for j in 0..b_unit.rows() {
                        let bj = b_unit.row(j);
                        let row = db.row_mut(j);
                        for i in 0..a_unit.rows() {
                            let (gij, cij, ai) = (g.get(i, j), out.get(i, j), a_unit.row(i));
                            for k in 0..row.len() {
                                row[k] += gij * (ai[k] - cij * bj[k]);
                            }
                        }
                        for v in row.iter_mut() {
                            *v /= b_norms[j];
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::ColSlice(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::HConcat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, g.col_slice(offset, w)?)?;
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.reshape(r, c)?)?;
            }
            Op::SumSquares(a) => {
                let c = 2.0 * g.get(0, 0);
                self.accumulate(grads, *a, self.value(*a).scale(c))?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                scale,
                probs,
            } => {
                let c = g.get(0, 0) / (labels.len() as f64 * scale);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(i);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= c;
                    }
                }
                self.accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}
