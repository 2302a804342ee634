//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, and a graph is rebuilt for every batch.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{gemm, softmax_in_place, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: Float = 1e-5;
const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Float = 0.044_715;

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<Float> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Float>, rstd: Vec<Float> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: usize, probs: Vec<Float> },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<Float>, count: usize },
    L2DistSq(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<Float> },
    Sum(Vec<Var>),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation over a borrowed parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar w.r.t. every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Float]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op} of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op} expects a matrix, got {s:?}"))),
    }
}

// The tanh approximation, written as 0.5 (1 + tanh(u)) = sigmoid(2u).
pub(crate) fn gelu(x: Float) -> Float {
    let u = GELU_C * (x + GELU_A * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

fn gelu_grad(x: Float) -> Float {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    s + x * 2.0 * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Normalises one row into `xhat` and `out = xhat * gain + bias`; returns
/// the reciprocal standard deviation.
pub(crate) fn layer_norm_row(row: &[Float], gain: &[Float], bias: &[Float], xhat: &mut [Float], out: &mut [Float]) -> Float {
    let n = row.len() as Float;
    let mean = row.iter().sum::<Float>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..row.len() {
        let h = (row[j] - mean) * r;
        xhat[j] = h;
        out[j] = h * gain[j] + bias[j];
    }
    r
}

/// Causal visibility for a query/key pair when the query block is aligned to
/// the end of the key block.
#[inline]
pub(crate) fn visible(causal: bool, qi: usize, kj: usize, tq: usize, tk: usize) -> bool {
    !causal || kj + tq <= qi + tk
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.tensor(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is tracked (used by tests and grad checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]` and a length-`n` bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = matrix("affine", tx)?;
        let (k2, n) = matrix("affine", tw)?;
        if k != k2 || tb.numel() != n {
            return Err(Error::Shape(format!(
                "affine of {:?} with weight {:?} and bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, 1.0, tx.data(), (k, 1), tw.data(), (n, 1), 1.0, &mut out, (n, 1));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Affine { x, w, b }, rg))
    }

    /// `a @ b^T` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul_bt", ta)?;
        let (n, k2) = matrix("matmul_bt", tb)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_bt of {:?} and {:?}: inner dimensions differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), (k, 1), tb.data(), (1, k), 0.0, &mut out, (n, 1));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = matrix("add_bias", tx)?;
        if tb.numel() != n {
            return Err(Error::Shape(format!("add_bias of {:?} and {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(r, b)| *r += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: Float) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout with a caller-supplied keep mask (already scaled).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<Float>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Shape(format!("dropout mask of {} for {:?}", mask.len(), tx.shape())));
        }
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Layer normalisation over the last axis of an `[m, n]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = matrix("layer_norm", tx)?;
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let span = i * n..(i + 1) * n;
            rstd[i] = layer_norm_row(&tx.data()[span.clone()], tg.data(), tb.data(), &mut xhat[span.clone()], &mut out[span]);
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut data = tx.data().to_vec();
        if n > 0 {
            data.chunks_mut(n).for_each(softmax_in_place);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq, d]`, `k` and `v` are `[tk, d]`; heads split the columns.
    /// With `causal`, query `i` sees keys `j <= i + tk - tq`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        self.attention_batched(q, k, v, heads, causal, 1)
    }

    /// Attention over `segments` independent sequences stacked along rows.
    ///
    /// Query segment `s` only attends to key segment `s`; all segments of a
    /// tensor have the same length.
    pub fn attention_batched(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool, segments: usize) -> Result<Var> {
        let (tqv, tkv, tvv) = (self.value(q), self.value(k), self.value(v));
        let (rq, d) = matrix("attention", tqv)?;
        let (rk, dk) = matrix("attention", tkv)?;
        if dk != d
            || tvv.shape() != tkv.shape()
            || heads == 0
            || d % heads != 0
            || segments == 0
            || rq % segments != 0
            || rk % segments != 0
        {
            return Err(Error::Shape(format!(
                "attention of q {:?}, k {:?}, v {:?} with {heads} heads over {segments} segments",
                tqv.shape(),
                tkv.shape(),
                tvv.shape()
            )));
        }
        let (tq, tk) = (rq / segments, rk / segments);
        if tk == 0 {
            return Err(Error::Degenerate("attention over an empty memory".into()));
        }
        if causal && tq > tk {
            return Err(Error::Shape(format!("causal attention with {tq} queries over {tk} keys")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let mut probs = vec![0.0; segments * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        for s in 0..segments {
            let (qs, ks) = (s * tq * d, s * tk * d);
            for h in 0..heads {
                let base = (s * heads + h) * tq * tk;
                let p = &mut probs[base..base + tq * tk];
                let off = h * dh;
                gemm(tq, dh, tk, scale, &tqv.data()[qs + off..], (d, 1), &tkv.data()[ks + off..], (1, d), 0.0, p, (tk, 1));
                for (i, row) in p.chunks_mut(tk).enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        if !visible(causal, i, j, tq, tk) {
                            *x = Float::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(tq, tk, dh, 1.0, p, (tk, 1), &tvv.data()[ks + off..], (d, 1), 0.0, &mut out[qs + off..], (d, 1));
            }
        }
        let out = Tensor::new(vec![rq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, segments, probs }, rg))
    }

    /// Attention weights `[segments, heads, tq, tk]` saved by an attention node,
    /// with the head count.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[Float])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// Gathers rows of `x`; also serves as the embedding lookup.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix("select_rows", tx)?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape(format!("row {r} out of range for {:?}", tx.shape())));
            }
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = matrix("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix("concat_rows", t)?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows with widths {n} and {c}")));
            }
            data.extend_from_slice(t.data());
            m += r;
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Column means of an `[m, n]` matrix as a `[1, n]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix("mean_rows", tx)?;
        if m == 0 {
            return Err(Error::Degenerate("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in tx.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
        }
        out.iter_mut().for_each(|o| *o /= m as Float);
        let out = Tensor::new(vec![1, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Mean negative log-likelihood over rows where `mask` is true.
    ///
    /// Targets of masked-out rows are never read.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = matrix("cross_entropy_masked", tl)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape(format!(
                "cross_entropy_masked of {:?} with {} targets and {} mask flags",
                tl.shape(),
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("every position is masked".into()));
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(Error::Shape(format!("target {target} outside vocabulary of {v}")));
            }
            let row = tl.row(i);
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<Float>().ln();
            total += lse - row[target];
            softmax_in_place(p);
        }
        let out = Tensor::scalar(total / count as Float);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(out, op, rg))
    }

    /// Sum over rows of the squared Euclidean distance between `a` and `b`.
    pub fn l2_distance_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("l2_distance_sq", ta, tb)?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L2DistSq(a, b), rg))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Float]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!(
                "bce_with_logits of {:?} with {} targets",
                tl.shape(),
                targets.len()
            )));
        }
        let n = targets.len() as Float;
        let s: Float = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        let op = Op::BceWithLogits { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(s / n), op, rg))
    }

    /// Sum of scalars, accumulated left to right.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for (i, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            if t.numel() != 1 {
                return Err(Error::Shape(format!("sum of non-scalar {:?}", t.shape())));
            }
            s = if i == 0 { t.item() } else { s + t.item() };
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::scalar(s), Op::Sum(parts.to_vec()), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    fn backward_scaled(&self, loss: Var, seed: Float) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<Float>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from `loss`, adding `scale * dloss/dparam` into `acc` for
    /// every trainable parameter touched by the graph.
    pub fn backward_into(&self, loss: Var, acc: &mut GradStore, scale: Float) -> Result<()> {
        let grads = self.backward_scaled(loss, scale)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_deref()) {
                acc.accumulate(*id, g, 1.0);
            }
        }
        Ok(())
    }

    /// Adds `g` into the gradient of `v`, copying on first write.
    fn add_grad(&self, grads: &mut [Option<Vec<Float>>], v: Var, g: &[Float]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<Float>>], v: Var) -> Option<&'g mut Vec<Float>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, idx: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (m, k) = self.value(*x).dims2()?;
                let (_, n) = self.value(*w).dims2()?;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(m, n, k, 1.0, g, (n, 1), wd, (1, n), 1.0, gx, (k, 1));
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(k, m, n, 1.0, xd, (1, k), g, (n, 1), 1.0, gw, (n, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let bdata = self.value(*b).data();
                let adata = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dC @ B^T
                    gemm(m, n, k, 1.0, g, (n, 1), bdata, (1, n), 1.0, ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += A^T @ dC
                    gemm(k, m, n, 1.0, adata, (1, k), g, (n, 1), 1.0, gb, (n, 1));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                let bdata = self.value(*b).data();
                let adata = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dC @ B
                    gemm(m, n, k, 1.0, g, (n, 1), bdata, (k, 1), 1.0, ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += dC^T @ A
                    gemm(n, m, k, 1.0, g, (1, n), adata, (k, 1), 1.0, gb, (k, 1));
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::AddBias(x, bias) => {
                self.add_grad(grads, *x, g);
                let n = self.value(*bias).numel();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let gd = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; n];
                    for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = grow[j] * gd[j];
                        }
                        let mean_dh = dh.iter().sum::<Float>() / n as Float;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<Float>() / n as Float;
                        let out = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.value(Var(idx));
                let n = *y.shape().last().unwrap_or(&1);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, yr), gr) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                        let dot: Float = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                self.attention_backward(*q, *k, *v, *heads, *segments, probs, g, grads)?;
            }
            Op::SelectRows { x, rows } => {
                let (_, n) = self.value(*x).dims2()?;
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * n..(i + 1) * n];
                        gx[r * n..(r + 1) * n].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.slot(grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2()?;
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = 1.0 / m as Float;
                    for row in gx.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let (_, v) = self.value(*logits).dims2()?;
                let scale = g[0] / *count as Float;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (j, r) in row.iter_mut().enumerate() {
                            *r += scale * probs[i * v + j];
                        }
                        row[targets[i]] -= scale;
                    }
                }
            }
            Op::L2DistSq(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(ad).zip(bd) {
                        *o += s * (x - y);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(ad).zip(bd) {
                        *o -= s * (x - y);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xd = self.value(*logits).data();
                let s = g[0] / targets.len() as Float;
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((o, x), y) in gl.iter_mut().zip(xd).zip(targets) {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        *o += s * (sig - y);
                    }
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    if let Some(gp) = self.slot(grads, *p) {
                        gp[0] += g[0];
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: usize,
        probs: &[Float],
        g: &[Float],
        grads: &mut [Option<Vec<Float>>],
    ) -> Result<()> {
        let (rq, d) = self.value(q).dims2()?;
        let (rk, _) = self.value(k).dims2()?;
        let (tq, tk) = (rq / segments, rk / segments);
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        // Separate buffers so that k and v may be the same node.
        let mut dq = vec![0.0; rq * d];
        let mut dk = vec![0.0; rk * d];
        let mut dv = vec![0.0; rk * d];
        let mut ds = vec![0.0; tq * tk];
        for s in 0..segments {
            let (qs, ks) = (s * tq * d, s * tk * d);
            for h in 0..heads {
                let off = h * dh;
                let base = (s * heads + h) * tq * tk;
                let ph = &probs[base..base + tq * tk];
                // dP, then dS = P * (dP - rowsum(P * dP)).
                gemm(tq, dh, tk, 1.0, &g[qs + off..], (d, 1), &vd[ks + off..], (1, d), 0.0, &mut ds, (tk, 1));
                for (drow, prow) in ds.chunks_mut(tk).zip(ph.chunks(tk)) {
                    let dot: Float = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (x, p) in drow.iter_mut().zip(prow) {
                        *x = p * (*x - dot);
                    }
                }
                gemm(tq, tk, dh, scale, &ds, (tk, 1), &kd[ks + off..], (d, 1), 0.0, &mut dq[qs + off..], (d, 1));
                gemm(tk, tq, dh, scale, &ds, (1, tk), &qd[qs + off..], (d, 1), 0.0, &mut dk[ks + off..], (d, 1));
                gemm(tk, tq, dh, 1.0, ph, (1, tk), &g[qs + off..], (d, 1), 0.0, &mut dv[ks + off..], (d, 1));
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn loss_gradient_wrt_itself_is_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        let l = g.l2_distance_sq(a, a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(l).unwrap(), &[1.0]);
    }

    #[test]
    fn matmul_backward_formulas() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.variable(t(&[1, 2], &[1.0, 2.0]));
        let b = g.variable(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let l = g.l2_distance_sq(c, z).unwrap();
        let grads = g.backward(l).unwrap();
        // l = (a.b)^2 = 121, dl/dc = 22
        assert_eq!(grads.get(a).unwrap(), &[66.0, 88.0]);
        assert_eq!(grads.get(b).unwrap(), &[22.0, 44.0]);
    }

    #[test]
    fn all_masked_cross_entropy_is_degenerate() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::zeros(&[2, 3]));
        let err = g.cross_entropy_masked(x, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn causal_attention_masks_future_keys() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::new(vec![3, 4], (0..12).map(|i| i as Float * 0.1).collect()).unwrap());
        let o = g.attention(x, x, x, 2, true).unwrap();
        let (_, probs) = g.attention_probs(o).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    assert_eq!(probs[h * 9 + i * 3 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_memory_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.variable(Tensor::zeros(&[2, 4]));
        let m = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(g.attention(q, m, m, 1, false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        let d = g.detach(a);
        let l = g.l2_distance_sq(a, d).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 0.0]);
        assert!(grads.get(d).is_none());
    }
}
