//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node to the tape, so nodes are recorded in
//! topological order and [`Tape::backward`] simply walks them in reverse.
//! The op set is the minimum needed by the encoder and the contrastive
//! objective; there is no general broadcasting.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Describes how a `[batch * seq_len, d_model]` activation matrix is split
/// into sequences for [`Tape::attention`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    /// Padded length shared by every sequence in the batch.
    pub seq_len: usize,
    /// Unpadded length of each sequence; keys at positions `>= lens[b]` are masked.
    pub lens: Vec<usize>,
    pub n_heads: usize,
    pub causal: bool,
}

impl AttentionLayout {
    fn key_limit(&self, b: usize, t: usize) -> usize {
        if self.causal {
            (t + 1).min(self.lens[b])
        } else {
            self.lens[b]
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_bt")?;
        let (n, k2) = tb.dims2("matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("transpose")?;
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if !ts.is_scalar() {
            return Err(shape_err("mul_scalar", ta, ts));
        }
        let c = ts.item();
        let out = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::MulScalar(a, s), &[a, s]))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = *ta.shape().last().unwrap_or(&1);
        if ta.shape().is_empty() || tb.len() != d {
            return Err(shape_err(op, ta, tb));
        }
        Ok(d)
    }

    /// Adds the length-`d` vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.row_broadcast("add_row", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bias = tb.data();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % d])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies every row of `a` elementwise by the length-`d` vector `g`.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        let d = self.row_broadcast("mul_row", a, g)?;
        let (ta, tg) = (self.value(a), self.value(g));
        let gain = tg.data();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * gain[i % d])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::MulRow(a, g), &[a, g]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push_op(value, Op::Gelu(a), &[a])
    }

    /// Normalises the last axis to zero mean and unit variance, dividing by
    /// `sqrt(var + eps)`. A zero-variance row maps to zeros (also when `eps == 0`).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let d = match ta.shape().last() {
            Some(&d) => d,
            None => return Err(Error::invalid("layer_norm needs at least one axis")),
        };
        let rows = ta.len() / d;
        let mut out = vec![0.0; ta.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &ta.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let s = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std[r] = s;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * s;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::LayerNorm { x: a, inv_std }, &[a]))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.shape().len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                ta.shape()
            )));
        }
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Softmax { x: a, axis }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "column range {start}..{end} invalid for {c} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&ta.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, w], out)?;
        Ok(self.push_op(value, Op::SliceCols { x: a, start }, &[a]))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n_rows, d) = tt.dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n_rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {n_rows} rows"
                )));
            }
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        let op = Op::GatherRows {
            table,
            idx: idx.to_vec(),
        };
        Ok(self.push_op(value, op, &[table]))
    }

    /// Scales every row of a matrix to unit L2 norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("l2_normalize_rows")?;
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = ta.row(i);
            let n = crate::tensor::norm(row);
            if n == 0.0 {
                return Err(Error::invalid(format!("row {i} has norm {n}")));
            }
            norms[i] = n;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push_op(value, Op::L2NormalizeRows { x: a, norms }, &[a]))
    }

    /// Multi-head scaled dot-product attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, d_model]`; each head uses a
    /// contiguous `d_model / n_heads` column block. Keys beyond a sequence's
    /// length (and, when causal, beyond the query position) get zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2("attention")?;
        if tk.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tv));
        }
        let l = layout.seq_len;
        let b_count = layout.lens.len();
        if l == 0 || b_count * l != rows {
            return Err(Error::invalid(format!(
                "attention layout {b_count}x{l} does not cover {rows} rows"
            )));
        }
        if layout.lens.iter().any(|&n| n == 0 || n > l) {
            return Err(Error::invalid("attention sequence length out of range"));
        }
        if layout.n_heads == 0 || d % layout.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d} not divisible by {} heads",
                layout.n_heads
            )));
        }
        let h_count = layout.n_heads;
        let dh = d / h_count;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; b_count * h_count * l * l];
        let mut scores = vec![0.0; l];
        for b in 0..b_count {
            for h in 0..h_count {
                let col = h * dh;
                for t in 0..l {
                    let qi = (b * l + t) * d + col;
                    let qrow = &qd[qi..qi + dh];
                    let limit = layout.key_limit(b, t);
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(limit) {
                        let ki = (b * l + j) * d + col;
                        *s = scale * crate::tensor::dot(qrow, &kd[ki..ki + dh]);
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut().take(limit) {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let pbase = ((b * h_count + h) * l + t) * l;
                    let oi = (b * l + t) * d + col;
                    for j in 0..limit {
                        let p = scores[j] / total;
                        probs[pbase + j] = p;
                        let vi = (b * l + j) * d + col;
                        for (o, x) in out[oi..oi + dh].iter_mut().zip(&vd[vi..vi + dh]) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            layout: layout.clone(),
            probs,
        };
        Ok(self.push_op(value, op, &[q, k, v]))
    }

    /// Mean cross-entropy of each row of `logits` against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = tl.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "{} targets for {n} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            for (p, x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push_op(value, op, &[logits]))
    }

    /// Populates gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let rg = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2("matmul").unwrap();
                let n = nodes[b.0].value.shape()[1];
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), true, ga, true);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, nodes[a.0].value.data(), true, g, false, gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let (m, k) = nodes[a.0].value.dims2("matmul_bt").unwrap();
                let n = nodes[b.0].value.shape()[0];
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), false, ga, true);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], n * k);
                    gemm(n, m, k, g, true, nodes[a.0].value.data(), false, gb, true);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let (r, c) = nodes[a.0].value.dims2("transpose").unwrap();
                    let ga = accumulate(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::MulScalar(a, s) => {
                let c = nodes[s.0].value.item();
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
                if rg(*s) {
                    let total: f64 = g.iter().zip(nodes[a.0].value.data()).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads[s.0], 1)[0] += total;
                }
            }
            Op::AddRow(a, b) => {
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let d = len(*b);
                    let gb = accumulate(&mut grads[b.0], d);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                }
            }
            Op::MulRow(a, w) => {
                let d = len(*w);
                let (va, vw) = (nodes[a.0].value.data(), nodes[w.0].value.data());
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        *x += y * vw[i % d];
                    }
                }
                if rg(*w) {
                    let gw = accumulate(&mut grads[w.0], d);
                    for (i, y) in g.iter().enumerate() {
                        gw[i % d] += y * va[i];
                    }
                }
            }
            Op::Exp(a) => {
                if rg(*a) {
                    let out = node.value.data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * o;
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let input = nodes[a.0].value.data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(input) {
                        *x += y * gelu_grad(*v);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if rg(*x) {
                    let y = node.value.data();
                    let d = g.len() / inv_std.len();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, s) in inv_std.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gy.iter().sum::<f64>() / d as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += s * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if rg(*x) {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let inner_dot: f64 = (0..n).map(|i| y[at(i)] * g[at(i)]).sum();
                            for i in 0..n {
                                gx[at(i)] += y[at(i)] * (g[at(i)] - inner_dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if rg(*a) {
                    let n = len(*a);
                    let ga = accumulate(&mut grads[a.0], n);
                    let s = g[0] / n as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let (r, c) = nodes[x.0].value.dims2("slice_cols").unwrap();
                    let w = node.value.shape()[1];
                    let gx = accumulate(&mut grads[x.0], r * c);
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if rg(*table) {
                    let d = nodes[table.0].value.shape()[1];
                    let gt = accumulate(&mut grads[table.0], len(*table));
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[src * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if rg(*x) {
                    let y = node.value.data();
                    let d = g.len() / norms.len();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, n) in norms.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let proj: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += (gy[j] - yr[j] * proj) / n;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (rows, d) = nodes[q.0].value.dims2("attention").unwrap();
                let l = layout.seq_len;
                let h_count = layout.n_heads;
                let dh = d / h_count;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; l];
                for b in 0..layout.lens.len() {
                    for h in 0..h_count {
                        let col = h * dh;
                        for t in 0..l {
                            let limit = layout.key_limit(b, t);
                            let pbase = ((b * h_count + h) * l + t) * l;
                            let p = &probs[pbase..pbase + limit];
                            let oi = (b * l + t) * d + col;
                            let go = &g[oi..oi + dh];
                            let mut weighted = 0.0;
                            for j in 0..limit {
                                let vi = (b * l + j) * d + col;
                                dp[j] = crate::tensor::dot(go, &vd[vi..vi + dh]);
                                weighted += p[j] * dp[j];
                                for (x, y) in dv[vi..vi + dh].iter_mut().zip(go) {
                                    *x += p[j] * y;
                                }
                            }
                            let qi = oi;
                            for j in 0..limit {
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let ki = (b * l + j) * d + col;
                                for c in 0..dh {
                                    dq[qi + c] += ds * kd[ki + c];
                                    dk[ki + c] += ds * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(var) {
                        let gv = accumulate(&mut grads[var.0], rows * d);
                        gv.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if rg(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let s = g[0] / n as f64;
                    let gl = accumulate(&mut grads[logits.0], n * c);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// `(outer, axis_len, inner)` for iterating along `axis` of a row-major shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
