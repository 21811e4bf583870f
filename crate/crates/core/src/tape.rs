//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Besides the generic kernels the tape has three fused attention
//! operations over stacked series (`rows = batch · seq_len`):
//! [`Tape::head_scores`], [`Tape::attention_weights`] and [`Tape::head_mix`].

use crate::error::{Error, Result};
use crate::sparse;
use crate::tensor::{self, gemm_nt_acc, gemm_tn_acc, Elementwise, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How attention scores become weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalizer {
    Softmax,
    /// Sparsegen-lin with the given coefficient.
    Sparsegen(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    HeadScores {
        k: Var,
        q: Var,
        seq_len: usize,
        heads: usize,
    },
    RowNormalize {
        scores: Var,
        kind: Normalizer,
    },
    HeadMix {
        weights: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    },
    MeanPool {
        x: Var,
        seq_len: usize,
    },
    MaskedAbsMean {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        count: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    /// Register an input. Its `requires_grad` flag decides whether gradients
    /// flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient written by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (r, c) = xv.dims2();
        if bv.len() != c {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Add, self.value(a), Some(self.value(b)))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Sub, self.value(a), Some(self.value(b)))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Mul, self.value(a), Some(self.value(b)))?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Scale(s), self.value(a), None)?;
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Relu, self.value(a), None)?;
        self.push(out, Op::Relu(a), &[a])
    }

    /// Multiply by a constant tensor of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: &Tensor) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Mul, self.value(a), Some(factor))?;
        self.push(out, Op::MulConst(a, factor.data().to_vec()), &[a])
    }

    pub fn add_const(&mut self, a: Var, addend: &Tensor) -> Result<Var> {
        let out = tensor::elementwise(Elementwise::Add, self.value(a), Some(addend))?;
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Row-wise layer normalisation with affine parameters of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", xv, g));
        }
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed[i * c + j] = n;
                out[i * c + j] = n * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-series, per-head scaled scores `K_h · Q_hᵀ / √d_k`.
    ///
    /// `k`, `q` are `[batch·seq_len × d_model]`; the result has shape
    /// `[batch·heads, seq_len, seq_len]`, series-major then head-major.
    pub fn head_scores(&mut self, k: Var, q: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (kv, qv) = (self.value(k), self.value(q));
        let (rows, d) = kv.dims2();
        if kv.shape() != qv.shape() || seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err("head_scores", kv, qv));
        }
        let batch = rows / seq_len;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; batch * heads * seq_len * seq_len];
        let (kd, qd) = (kv.data(), qv.data());
        for b in 0..batch {
            for h in 0..heads {
                let block = &mut out[(b * heads + h) * seq_len * seq_len..(b * heads + h + 1) * seq_len * seq_len];
                for i in 0..seq_len {
                    let krow = &kd[(b * seq_len + i) * d + h * dk..(b * seq_len + i) * d + (h + 1) * dk];
                    for j in 0..seq_len {
                        let qrow = &qd[(b * seq_len + j) * d + h * dk..(b * seq_len + j) * d + (h + 1) * dk];
                        let dot: f64 = krow.iter().zip(qrow).map(|(x, y)| x * y).sum();
                        block[i * seq_len + j] = dot * scale;
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, seq_len, seq_len], out)?;
        self.push(out, Op::HeadScores { k, q, seq_len, heads }, &[k, q])
    }

    /// Row-normalise stacked score blocks after adding a constant
    /// `[n×n]` additive mask to every block.
    pub fn attention_weights(&mut self, scores: Var, mask: &Tensor, kind: Normalizer) -> Result<Var> {
        let sv = self.value(scores);
        let (rows, n) = sv.dims2();
        let (mr, mc) = mask.dims2();
        if mc != n || mr == 0 || rows % mr != 0 {
            return Err(shape_err("attention_weights", sv, mask));
        }
        let mut out = vec![0.0; rows * n];
        match kind {
            Normalizer::Softmax => tensor::softmax_rows_into(sv.data(), mask.data(), n, &mut out)?,
            Normalizer::Sparsegen(lambda) => {
                sparse::check_lambda(lambda)?;
                let scale = 1.0 / (1.0 - lambda);
                let (mut buf, mut shifted) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (r, (row, out_row)) in sv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                    let m = &mask.data()[(r % mr) * n..(r % mr + 1) * n];
                    sparse::sparsegen_row_into(row, m, scale, &mut buf, &mut shifted, out_row)
                        .ok_or(Error::DegenerateRow { row: r })?;
                }
            }
        }
        let out = Tensor::new(sv.shape().to_vec(), out)?;
        self.push(out, Op::RowNormalize { scores, kind }, &[scores])
    }

    /// Row softmax of a 2-D score matrix with an additive mask.
    pub fn softmax_rows(&mut self, scores: Var, mask: &Tensor) -> Result<Var> {
        self.attention_weights(scores, mask, Normalizer::Softmax)
    }

    /// Per-head weighted sum of values; inverse layout of [`Tape::head_scores`].
    pub fn head_mix(&mut self, weights: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(v));
        let (rows, d) = vv.dims2();
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err("head_mix", wv, vv));
        }
        let batch = rows / seq_len;
        if wv.shape() != [batch * heads, seq_len, seq_len] {
            return Err(shape_err("head_mix", wv, vv));
        }
        let dk = d / heads;
        let mut out = vec![0.0; rows * d];
        let (w, vd) = (wv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let block = &w[(b * heads + h) * seq_len * seq_len..(b * heads + h + 1) * seq_len * seq_len];
                for i in 0..seq_len {
                    let orow = (b * seq_len + i) * d + h * dk;
                    for j in 0..seq_len {
                        let p = block[i * seq_len + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = (b * seq_len + j) * d + h * dk;
                        for c in 0..dk {
                            out[orow + c] += p * vd[vrow + c];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(out, Op::HeadMix { weights, v, seq_len, heads }, &[weights, v])
    }

    /// Mean over each series' `seq_len` consecutive rows: `[B·n × d] → [B × d]`.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.dims2();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::contract(format!("mean_pool: {rows} rows not divisible by {seq_len}")));
        }
        let batch = rows / seq_len;
        let mut out = vec![0.0; batch * d];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let o = &mut out[(r / seq_len) * d..(r / seq_len + 1) * d];
            for (a, v) in o.iter_mut().zip(row) {
                *a += v / seq_len as f64;
            }
        }
        let out = Tensor::new(vec![batch, d], out)?;
        self.push(out, Op::MeanPool { x, seq_len }, &[x])
    }

    /// `Σ mask·|pred − target| / Σ mask` as a scalar.
    pub fn masked_abs_mean(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.len() != mask.len() {
            return Err(shape_err("masked_abs_mean", pv, target));
        }
        let count: f64 = mask.data().iter().sum();
        if count <= 0.0 {
            return Err(Error::contract("masked mean over an empty mask"));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((p, t), m)| m * (p - t).abs())
            .sum();
        let out = Tensor::scalar(total / count);
        self.push(
            out,
            Op::MaskedAbsMean {
                pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                count,
            },
            &[pred],
        )
    }

    /// Mean cross-entropy of row logits over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dims2();
        if targets.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count() as f64;
        if count == 0.0 {
            return Err(Error::contract("cross_entropy without any labeled row"));
        }
        let mut probs = vec![0.0; rows * classes];
        let zero_mask = vec![0.0; classes];
        tensor::softmax_rows_into(lv.data(), &zero_mask, classes, &mut probs)?;
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(c) = *t {
                if c >= classes {
                    return Err(Error::contract(format!("class {c} out of range for {classes} logits")));
                }
                let row = &lv.data()[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[c];
            }
        }
        let out = Tensor::scalar(total / count);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Propagate `d loss / d node` to every node that requires a gradient and
    /// is reachable from `loss`, storing it in the node's `grad` slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("backward on a loss that does not require grad"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            self.nodes[idx].value.grad = Some(g);
        }
        Ok(())
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let c = self.value(*bias).len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MulConst(a, factor) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), f) in ga.iter_mut().zip(g).zip(factor) {
                        *o += gv * f;
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (grow, nrow) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * nrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dn = vec![0.0; c];
                    for (r, (grow, nrow)) in g.chunks(c).zip(normed.chunks(c)).enumerate() {
                        for j in 0..c {
                            dn[j] = grow[j] * gam[j];
                        }
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += scale * (c as f64 * dn[j] - sum_dn - nrow[j] * sum_dn_n);
                        }
                    }
                }
            }
            Op::HeadScores { k, q, seq_len, heads } => {
                let (kv, qv) = (self.value(*k), self.value(*q));
                let (rows, d) = kv.dims2();
                let (n, h_count) = (*seq_len, *heads);
                let batch = rows / n;
                let dk = d / h_count;
                let scale = 1.0 / (dk as f64).sqrt();
                if let Some(gk) = self.acc(grads, *k) {
                    for b in 0..batch {
                        for h in 0..h_count {
                            let block = &g[(b * h_count + h) * n * n..(b * h_count + h + 1) * n * n];
                            for i in 0..n {
                                let krow = (b * n + i) * d + h * dk;
                                for j in 0..n {
                                    let s = block[i * n + j] * scale;
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let qrow = (b * n + j) * d + h * dk;
                                    for c in 0..dk {
                                        gk[krow + c] += s * qv.data()[qrow + c];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gq) = self.acc(grads, *q) {
                    for b in 0..batch {
                        for h in 0..h_count {
                            let block = &g[(b * h_count + h) * n * n..(b * h_count + h + 1) * n * n];
                            for i in 0..n {
                                let krow = (b * n + i) * d + h * dk;
                                for j in 0..n {
                                    let s = block[i * n + j] * scale;
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let qrow = (b * n + j) * d + h * dk;
                                    for c in 0..dk {
                                        gq[qrow + c] += s * kv.data()[krow + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::RowNormalize { scores, kind } => {
                let p = node.value.data();
                let n = node.value.dims2().1;
                if let Some(gs) = self.acc(grads, *scores) {
                    match kind {
                        Normalizer::Softmax => {
                            for ((prow, grow), orow) in p.chunks(n).zip(g.chunks(n)).zip(gs.chunks_mut(n)) {
                                let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                                for j in 0..n {
                                    orow[j] += prow[j] * (grow[j] - dot);
                                }
                            }
                        }
                        Normalizer::Sparsegen(lambda) => {
                            let scale = 1.0 / (1.0 - lambda);
                            for ((prow, grow), orow) in p.chunks(n).zip(g.chunks(n)).zip(gs.chunks_mut(n)) {
                                sparse::sparsegen_row_backward(prow, grow, scale, orow);
                            }
                        }
                    }
                }
            }
            Op::HeadMix { weights, v, seq_len, heads } => {
                let (wv, vv) = (self.value(*weights), self.value(*v));
                let (rows, d) = vv.dims2();
                let (n, h_count) = (*seq_len, *heads);
                let batch = rows / n;
                let dk = d / h_count;
                if let Some(gw) = self.acc(grads, *weights) {
                    for b in 0..batch {
                        for h in 0..h_count {
                            let off = (b * h_count + h) * n * n;
                            for i in 0..n {
                                let orow = (b * n + i) * d + h * dk;
                                for j in 0..n {
                                    let vrow = (b * n + j) * d + h * dk;
                                    let mut acc = 0.0;
                                    for c in 0..dk {
                                        acc += g[orow + c] * vv.data()[vrow + c];
                                    }
                                    gw[off + i * n + j] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(gvv) = self.acc(grads, *v) {
                    for b in 0..batch {
                        for h in 0..h_count {
                            let off = (b * h_count + h) * n * n;
                            for i in 0..n {
                                let orow = (b * n + i) * d + h * dk;
                                for j in 0..n {
                                    let p = wv.data()[off + i * n + j];
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let vrow = (b * n + j) * d + h * dk;
                                    for c in 0..dk {
                                        gvv[vrow + c] += p * g[orow + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanPool { x, seq_len } => {
                let d = node.value.dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, orow) in gx.chunks_mut(d).enumerate() {
                        let grow = &g[(r / seq_len) * d..(r / seq_len + 1) * d];
                        for (o, v) in orow.iter_mut().zip(grow) {
                            *o += v / *seq_len as f64;
                        }
                    }
                }
            }
            Op::MaskedAbsMean {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = self.value(*pred).data();
                if let Some(gp) = self.acc(grads, *pred) {
                    for i in 0..gp.len() {
                        let diff = pv[i] - target[i];
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp[i] += g[0] * mask[i] * sign / count;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = node_classes(self.value(*logits));
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(c) = *t {
                            for j in 0..classes {
                                let onehot = if j == c { 1.0 } else { 0.0 };
                                gl[r * classes + j] += g[0] * (probs[r * classes + j] - onehot) / count;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(())
    }
}

fn node_classes(t: &Tensor) -> usize {
    t.dims2().1
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::MulConst(..) => "mul_const",
        Op::AddConst(..) => "add_const",
        Op::LayerNorm { .. } => "layer_norm",
        Op::HeadScores { .. } => "head_scores",
        Op::RowNormalize { .. } => "attention_weights",
        Op::HeadMix { .. } => "head_mix",
        Op::MeanPool { .. } => "mean_pool",
        Op::MaskedAbsMean { .. } => "masked_abs_mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
    }
}
