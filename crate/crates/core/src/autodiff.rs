//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every op records its inputs and whatever it needs for the adjoint.
//! Nodes that do not depend on a parameter are skipped during the backward
//! sweep.

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};
use crate::retention::{retain, retain_backward, Paradigm};
use crate::tensor::{hswish_grad_scalar, hswish_scalar, mean_var, sigmoid, Matrix};

/// Lower clamp for probabilities inside log-losses.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named learnable matrices with a stable flat enumeration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(GrnError::InvalidArgument(format!(
                "flat vector has {} entries, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for m in &mut self.values {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Name of the parameter owning flat coordinate `index`.
    pub fn name_of_flat(&self, mut index: usize) -> Option<&str> {
        for (name, m) in self.names.iter().zip(&self.values) {
            let n = m.data().len();
            if index < n {
                return Some(name);
            }
            index -= n;
        }
        None
    }
}

/// One retention sequence inside a batched retention op.
#[derive(Clone, Debug)]
pub struct RetentionSegment {
    pub start: usize,
    pub len: usize,
    pub weights: Vec<f64>,
    pub s_in: Matrix,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    HSwish(Var),
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Retention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<RetentionSegment>,
        paradigm: Paradigm,
        normalized: bool,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
        probs: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    SumAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Matrix>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(GrnError::shape("add_bias", self.value(x).shape(), b.shape()));
        }
        let value = self.value(x).add_row(b.data())?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        let value = self.value(x).hadamard(&c)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MulConst(x, c), ng))
    }

    pub fn hswish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(hswish_scalar);
        let ng = self.ng(x);
        self.push(value, Op::HSwish(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.group_norm(x, 1, gain, bias, eps)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if cols == 0 || groups == 0 || cols % groups != 0 {
            return Err(GrnError::InvalidArgument(format!("cannot split {cols} channels into {groups} groups")));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(GrnError::shape("norm affine", g.shape(), b.shape()));
        }
        let width = cols / groups;
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows() * groups);
        for r in 0..xv.rows() {
            let row = normalized.row_mut(r);
            for gi in 0..groups {
                let seg = &mut row[gi * width..(gi + 1) * width];
                let (mean, var) = mean_var(seg);
                let inv = 1.0 / (var + eps).sqrt();
                seg.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
        }
        let mut value = normalized.clone();
        for r in 0..value.rows() {
            for ((v, &gv), &bv) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gain,
                bias,
                groups,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceCols(x, start), ng))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(GrnError::InvalidArgument(format!("row {bad} out of range for {rows} rows")));
        }
        let value = self.value(x).gather_rows(&indices);
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherRows(x, indices), ng))
    }

    /// Batched retention over disjoint row segments of `q`, `k`, `v`.
    /// Returns the output rows and the final state of every segment.
    pub fn retention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<RetentionSegment>,
        paradigm: Paradigm,
        normalized: bool,
    ) -> Result<(Var, Vec<Matrix>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rows() != kv.rows() || kv.rows() != vv.rows() {
            return Err(GrnError::shape("retention", qv.shape(), vv.shape()));
        }
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let mut states = Vec::with_capacity(segments.len());
        for seg in &segments {
            let end = seg.start + seg.len;
            let (o, s) = retain(
                &qv.slice_rows(seg.start, end)?,
                &kv.slice_rows(seg.start, end)?,
                &vv.slice_rows(seg.start, end)?,
                &seg.weights,
                &seg.s_in,
                paradigm,
                normalized,
            )?;
            for r in 0..seg.len {
                out.row_mut(seg.start + r).copy_from_slice(o.row(r));
            }
            states.push(s);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let var = self.push(
            out,
            Op::Retention {
                q,
                k,
                v,
                segments,
                paradigm,
                normalized,
            },
            ng,
        );
        Ok((var, states))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels,
    /// with probabilities clamped to `[ε, 1-ε]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 || z.rows() != labels.len() || labels.is_empty() {
            return Err(GrnError::shape("bce_with_logits", z.shape(), (labels.len(), 1)));
        }
        let probs: Vec<f64> = z.data().iter().map(|&x| sigmoid(x)).collect();
        let loss = bce_from_logits(z.data(), &labels);
        let ng = self.ng(logits);
        Ok(self.push(Matrix::scalar(loss), Op::BceWithLogits { logits, labels, probs }, ng))
    }

    /// Mean categorical cross-entropy of row-wise softmax.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() || labels.is_empty() || labels.iter().any(|&l| l >= z.cols()) {
            return Err(GrnError::shape("softmax_xent", z.shape(), (labels.len(), 1)));
        }
        let probs = softmax_rows(z);
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &c)| -probs.get(r, c).max(PROB_EPS).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        Ok(self.push(Matrix::scalar(loss), Op::SoftmaxXent { logits, labels, probs }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(GrnError::shape("backward", self.value(loss).shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out: Vec<Matrix> = store.values().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0].add_assign(&g)?,
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = g.matmul_transposed(self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.ng(*b) {
                        let db = self.value(*a).transposed_matmul(&g)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Matrix::row_vector(&g.col_sums()))?;
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s))?,
                Op::MulConst(x, c) => accumulate(&mut grads, *x, g.hadamard(c)?)?,
                Op::HSwish(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= hswish_grad_scalar(v);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Norm {
                    x,
                    gain,
                    bias,
                    groups,
                    normalized,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    if self.ng(*bias) {
                        accumulate(&mut grads, *bias, Matrix::row_vector(&g.col_sums()))?;
                    }
                    if self.ng(*gain) {
                        let dg = g.hadamard(normalized)?.col_sums();
                        accumulate(&mut grads, *gain, Matrix::row_vector(&dg))?;
                    }
                    if self.ng(*x) {
                        let cols = g.cols();
                        let width = cols / groups;
                        let mut dx = Matrix::zeros(g.rows(), cols);
                        let mut dxhat = vec![0.0; width];
                        for r in 0..g.rows() {
                            for gi in 0..*groups {
                                let lo = gi * width;
                                let xh = &normalized.row(r)[lo..lo + width];
                                for c in 0..width {
                                    dxhat[c] = g.get(r, lo + c) * gain_v.get(0, lo + c);
                                }
                                let sum_d: f64 = dxhat.iter().sum();
                                let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                                let inv = inv_std[r * groups + gi];
                                let n = width as f64;
                                let row = dx.row_mut(r);
                                for c in 0..width {
                                    row[lo + c] = inv / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx)?;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            accumulate(&mut grads, p, g.slice_cols(start, start + w)?)?;
                        }
                        start += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::GatherRows(x, indices) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, &s) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Retention {
                    q,
                    k,
                    v,
                    segments,
                    paradigm,
                    normalized,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                    let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                    let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                    for seg in segments {
                        let end = seg.start + seg.len;
                        let (sq, sk, sv) = retain_backward(
                            &qv.slice_rows(seg.start, end)?,
                            &kv.slice_rows(seg.start, end)?,
                            &vv.slice_rows(seg.start, end)?,
                            &seg.weights,
                            &seg.s_in,
                            *paradigm,
                            *normalized,
                            &g.slice_rows(seg.start, end)?,
                        )?;
                        for r in 0..seg.len {
                            dq.row_mut(seg.start + r).copy_from_slice(sq.row(r));
                            dk.row_mut(seg.start + r).copy_from_slice(sk.row(r));
                            dv.row_mut(seg.start + r).copy_from_slice(sv.row(r));
                        }
                    }
                    if self.ng(*q) {
                        accumulate(&mut grads, *q, dq)?;
                    }
                    if self.ng(*k) {
                        accumulate(&mut grads, *k, dk)?;
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads, *v, dv)?;
                    }
                }
                Op::BceWithLogits { logits, labels, probs } => {
                    let n = labels.len() as f64;
                    let scale = g.get(0, 0) / n;
                    let data = probs
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p < PROB_EPS || p > 1.0 - PROB_EPS {
                                0.0
                            } else {
                                (p - y) * scale
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Matrix::from_vec(labels.len(), 1, data)?)?;
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let n = labels.len() as f64;
                    let scale = g.get(0, 0) / n;
                    let mut dz = probs.clone();
                    for (r, &c) in labels.iter().enumerate() {
                        let pc = probs.get(r, c);
                        if pc < PROB_EPS {
                            dz.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        dz.set(r, c, pc - 1.0);
                        dz.row_mut(r).iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads, *logits, dz)?;
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.get(0, 0)))?;
                }
            }
        }

        for (i, m) in out.iter().enumerate() {
            if !m.is_finite() {
                return Err(GrnError::NonFiniteGradient {
                    name: store.name(ParamId(i)).to_string(),
                });
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Mean of `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[ε, 1-ε]`.
/// Same value as [`bce_from_probs`] on `sigmoid(logits)`, computed from the
/// logits so that saturated predictions keep full precision.
pub fn bce_from_logits(logits: &[f64], labels: &[f64]) -> f64 {
    let bound = ((1.0 - PROB_EPS) / PROB_EPS).ln();
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let n = labels.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let z = z.clamp(-bound, bound);
            y * softplus(-z) + (1.0 - y) * softplus(z)
        })
        .sum::<f64>()
        / n
}

pub fn bce_from_probs(probs: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, RngState};

    /// Compares tape gradients with central differences for `build`, which
    /// maps a tape and parameter store to a scalar loss.
    fn grad_check<F>(store: &mut ParamStore, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        let analytic = tape.backward(loss, store).unwrap().flatten();
        let base = store.flatten();
        let mut probe = store.clone();
        let fd = finite_diff_grad(
            |x| {
                probe.assign_flat(x).unwrap();
                let mut t = Tape::new();
                let l = build(&mut t, &probe);
                t.value(l).get(0, 0)
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
            let rel = (a - f).abs() / f.abs().max(1e-3);
            assert!(rel < tol, "coord {i} ({}): {a} vs {f}", store.name_of_flat(i).unwrap());
        }
    }

    #[test]
    fn linear_hswish_norm_gradients() {
        let mut rng = RngState::new(5);
        let mut store = ParamStore::new();
        let x = rng.normal_matrix(4, 6, 1.0);
        let probe = rng.normal_matrix(4, 6, 1.0);
        let w = store.add("w", rng.normal_matrix(6, 6, 0.5));
        let b = store.add("b", rng.normal_matrix(1, 6, 0.5));
        let g = store.add("g", rng.uniform_matrix(1, 6, 0.5, 1.5));
        let beta = store.add("beta", rng.normal_matrix(1, 6, 0.1));
        grad_check(
            &mut store,
            |t, s| {
                let xv = t.constant(x.clone());
                let (w, b, g, beta) = (t.param(s, w), t.param(s, b), t.param(s, g), t.param(s, beta));
                let y = t.linear(xv, w, Some(b)).unwrap();
                let y = t.hswish(y);
                let y = t.group_norm(y, 2, g, beta, 1e-5).unwrap();
                let y = t.mul_const(y, probe.clone()).unwrap();
                t.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn concat_slice_gather_gradients() {
        let mut rng = RngState::new(6);
        let mut store = ParamStore::new();
        let a = store.add("a", rng.normal_matrix(3, 2, 1.0));
        let b = store.add("b", rng.normal_matrix(3, 3, 1.0));
        let probe = rng.normal_matrix(5, 3, 1.0);
        grad_check(
            &mut store,
            |t, s| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let c = t.concat_cols(&[a, b]).unwrap();
                let c = t.slice_cols(c, 1, 4).unwrap();
                let c = t.gather_rows(c, vec![0, 2, 2, 1, 0]).unwrap();
                let c = t.scale(c, 0.7);
                let c = t.mul_const(c, probe.clone()).unwrap();
                t.sum_all(c)
            },
            1e-6,
        );
    }

    #[test]
    fn loss_gradients() {
        let mut rng = RngState::new(7);
        let mut store = ParamStore::new();
        let z = store.add("z", rng.normal_matrix(6, 1, 1.0));
        let zz = store.add("zz", rng.normal_matrix(4, 3, 1.0));
        grad_check(
            &mut store,
            |t, s| {
                let z = t.param(s, z);
                let l1 = t.bce_with_logits(z, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
                let zz = t.param(s, zz);
                let l2 = t.softmax_xent(zz, vec![0, 2, 1, 2]).unwrap();
                t.add(l1, l2).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn logistic_regression_closed_form() {
        // d/dw BCE(σ(x·w), y) = (p - y) x.
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::column_vector(&[0.3, -0.2]));
        let x = Matrix::row_vector(&[1.5, 2.0]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(&store, w);
        let z = t.matmul(xv, wv).unwrap();
        let loss = t.bce_with_logits(z, vec![1.0]).unwrap();
        let g = t.backward(loss, &store).unwrap();
        let p = sigmoid(1.5 * 0.3 - 2.0 * 0.2);
        let want = [(p - 1.0) * 1.5, (p - 1.0) * 2.0];
        for (a, b) in g.get(w).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn retention_op_gradients() {
        let mut rng = RngState::new(8);
        let mut store = ParamStore::new();
        let q = store.add("q", rng.normal_matrix(7, 3, 1.0));
        let k = store.add("k", rng.normal_matrix(7, 3, 1.0));
        let v = store.add("v", rng.normal_matrix(7, 3, 1.0));
        let probe = rng.normal_matrix(7, 3, 1.0);
        let segments = vec![
            RetentionSegment {
                start: 0,
                len: 3,
                weights: vec![1.0, 0.5, 0.25],
                s_in: rng.normal_matrix(3, 3, 1.0),
            },
            RetentionSegment {
                start: 3,
                len: 4,
                weights: vec![1.0; 4],
                s_in: Matrix::zeros(3, 3),
            },
        ];
        for (paradigm, normalized) in [
            (Paradigm::Parallel, false),
            (Paradigm::Chunkwise(2), true),
            (Paradigm::Recurrent, false),
        ] {
            grad_check(
                &mut store,
                |t, s| {
                    let (qv, kv, vv) = (t.param(s, q), t.param(s, k), t.param(s, v));
                    let (o, _) = t.retention(qv, kv, vv, segments.clone(), paradigm, normalized).unwrap();
                    let o = t.mul_const(o, probe.clone()).unwrap();
                    t.sum_all(o)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn zero_loss_region_has_small_gradient() {
        let mut store = ParamStore::new();
        let z = store.add("z", Matrix::column_vector(&[40.0, -40.0]));
        let mut t = Tape::new();
        let zv = t.param(&store, z);
        let loss = t.bce_with_logits(zv, vec![1.0, 0.0]).unwrap();
        let g = t.backward(loss, &store).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-12));
        assert!(t.value(loss).get(0, 0) < 1e-11);
    }

    #[test]
    fn flat_round_trip() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::from_rows(&[[1.0, 2.0]]));
        store.add("b", Matrix::from_rows(&[[3.0], [4.0]]));
        let flat = store.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(store.name_of_flat(2), Some("b"));
        let mut other = store.clone();
        other.assign_flat(&[0.0; 4]).unwrap();
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, store);
        assert!(other.assign_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn logit_bce_matches_probability_bce() {
        let z = [-30.0, -3.0, -0.2, 0.0, 0.7, 5.0, 40.0];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let p: Vec<f64> = z.iter().map(|&v| crate::tensor::sigmoid(v)).collect();
        let (a, b) = (bce_from_logits(&z, &y), bce_from_probs(&p, &y));
        // The probability form loses precision near the clamp at 1 - ε.
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}
