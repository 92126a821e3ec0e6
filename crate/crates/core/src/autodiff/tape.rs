//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are copied onto the
//! tape, every op appends one node, and [`Tape::backward`] walks the nodes in
//! reverse, returning a [`Gradients`] table keyed by [`Var`].

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Column(Var, usize),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    TopKSoftmax { input: Var, mask: Vec<bool> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanGroups { x: Var, group: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Kl { p: Var, target: Vec<f64> },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Indices of the `k` largest entries; ties go to the lowest index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a tensor onto the tape. Gradients are tracked when the tensor
    /// is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        let needs = t.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(out, Op::Transpose(a), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2();
        if tr.numel() != n {
            return Err(dim_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Multiplies row `i` of an `m×n` matrix by `scales[i]` (an `m×1` column).
    pub fn scale_rows(&mut self, a: Var, scales: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(scales));
        let (m, n) = ta.dims2();
        if ts.numel() != m {
            return Err(dim_err("scale_rows", ta, ts));
        }
        let mut data = ta.data().to_vec();
        for (i, s) in ts.data().iter().enumerate() {
            data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(scales);
        Ok(self.push(out, Op::ScaleRows(a, scales), needs))
    }

    /// Column `j` of a matrix as an `m×1` tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if j >= n {
            return Err(Error::Dimension {
                op: "column",
                left: ta.shape().to_vec(),
                right: vec![j],
            });
        }
        let data = (0..m).map(|i| ta.data()[i * n + j]).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Column(a, j), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Gelu(a), needs)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Input("softmax of non-finite logits".into()));
        }
        let (_, n) = ta.dims2();
        let mut data = ta.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), needs))
    }

    /// Row-wise softmax over the `k` largest entries of each row; every other
    /// entry is exactly zero. The selected set is held fixed during backward.
    pub fn top_k_softmax(&mut self, a: Var, k: usize) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Input("routing logits are not finite".into()));
        }
        let (m, n) = ta.dims2();
        let mut data = vec![0.0; m * n];
        let mut mask = vec![false; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let sel = top_k_indices(row, k);
            let mut vals: Vec<f64> = sel.iter().map(|&j| row[j]).collect();
            softmax_in_place(&mut vals);
            for (&j, v) in sel.iter().zip(vals) {
                data[i * n + j] = v;
                mask[i * n + j] = true;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::TopKSoftmax { input: a, mask }, needs))
    }

    /// Row-wise layer normalization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = tx.dims2();
        if tg.numel() != n || tb.numel() != n {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product self-attention over consecutive groups
    /// of `seq` rows. `q`, `k`, `v` are `(batch·seq)×d`; `d` splits evenly
    /// into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(dim_err("attention", tq, tk));
        }
        let (rows, d) = tq.dims2();
        if seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                left: tq.shape().to_vec(),
                right: vec![seq, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq;
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        p[i * seq + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut p[i * seq..(i + 1) * seq]);
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let w = p[i * seq + j];
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
        }
        let out = Tensor::new(tq.shape().to_vec(), out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Averages consecutive groups of `group` rows: `(g·m)×n → m×n`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, n) = tx.dims2();
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension {
                op: "mean_groups",
                left: tx.shape().to_vec(),
                right: vec![group],
            });
        }
        let m = rows / group;
        let mut out = vec![0.0; m * n];
        for r in 0..rows {
            let o = &mut out[(r / group) * n..][..n];
            o.iter_mut()
                .zip(&tx.data()[r * n..(r + 1) * n])
                .for_each(|(a, b)| *a += b);
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let out = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanGroups { x, group }, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2();
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(loss / b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `Σ p·ln(p/q)` against a fixed target `q`, with `0·ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != target.len() {
            return Err(Error::Dimension {
                op: "kl_divergence",
                left: tp.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        if tp.data().iter().any(|v| *v < 0.0) || target.iter().any(|v| *v <= 0.0) {
            return Err(Error::Input("kl_divergence needs p >= 0 and q > 0".into()));
        }
        let value = tp
            .data()
            .iter()
            .zip(target)
            .filter(|(pv, _)| **pv > 0.0)
            .map(|(pv, qv)| pv * (pv / qv).ln())
            .sum();
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Kl {
                p,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Allocates the gradient buffer of `v` on demand when it needs one.
        fn slot<'a>(tape: &Tape, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !tape.nodes[v.0].needs_grad {
                return None;
            }
            let n = tape.nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                if let Some(ga) = slot(self, grads, *a) {
                    kernels::matmul_bt_acc(g, tb.data(), m, n, k, ga);
                }
                if let Some(gb) = slot(self, grads, *b) {
                    kernels::matmul_at_acc(ta.data(), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                if let Some(ga) = slot(self, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(self, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = slot(self, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let n = self.value(*row).numel();
                if let Some(gr) = slot(self, grads, *row) {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = slot(self, grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = slot(self, grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += gy * av;
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let (_, n) = ta.dims2();
                if let Some(ga) = slot(self, grads, *a) {
                    for (i, sv) in ts.data().iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * sv;
                        }
                    }
                }
                if let Some(gs) = slot(self, grads, *s) {
                    for (i, gsv) in gs.iter_mut().enumerate() {
                        let row = &ta.data()[i * n..(i + 1) * n];
                        *gsv += row.iter().zip(&g[i * n..(i + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Column(a, j) => {
                let (_, n) = self.value(*a).dims2();
                if let Some(ga) = slot(self, grads, *a) {
                    for (i, gv) in g.iter().enumerate() {
                        ga[i * n + j] += gv;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(self, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = slot(self, grads, *a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *x += gy * gelu_grad(*av);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.dims2().1;
                let y = node.value.data();
                if let Some(ga) = slot(self, grads, *a) {
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::TopKSoftmax { input, mask } => {
                let n = node.value.dims2().1;
                let y = node.value.data();
                if let Some(ga) = slot(self, grads, *input) {
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let mr = &mask[i * n..(i + 1) * n];
                        let dot: f64 = (0..n).filter(|&j| mr[j]).map(|j| yr[j] * gr[j]).sum();
                        for j in (0..n).filter(|&j| mr[j]) {
                            ga[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.dims2().1;
                let gm = self.value(*gamma).data().to_vec();
                if let Some(gx) = slot(self, grads, *x) {
                    for (i, is) in inv_std.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(&gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += is / n as f64 * (n as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                if let Some(gg) = slot(self, grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(self, grads, *beta) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq, *heads, probs, grads),
            Op::MeanGroups { x, group } => {
                let n = node.value.dims2().1;
                if let Some(gx) = slot(self, grads, *x) {
                    let inv = 1.0 / *group as f64;
                    for (r, row) in gx.chunks_mut(n).enumerate() {
                        let gr = &g[(r / group) * n..][..n];
                        row.iter_mut().zip(gr).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                if let Some(gl) = slot(self, grads, *logits) {
                    let s = g[0] / b as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Kl { p, target } => {
                let tp = self.value(*p);
                if let Some(gp) = slot(self, grads, *p) {
                    for ((x, pv), qv) in gp.iter_mut().zip(tp.data()).zip(target) {
                        if *pv > 0.0 {
                            *x += g[0] * ((pv / qv).ln() + 1.0);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(self, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(self, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = self.value(q).dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let at = |i: usize| (b * seq + i) * d + h * dh;
                // dP = dO·Vᵀ and dV = Pᵀ·dO
                for i in 0..seq {
                    let go = &g[at(i)..][..dh];
                    for j in 0..seq {
                        let vj = &vd[at(j)..][..dh];
                        dp[i * seq + j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = p[i * seq + j];
                        gv[at(j)..][..dh].iter_mut().zip(go).for_each(|(a, o)| *a += w * o);
                    }
                }
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through S = QKᵀ·scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        let ds = pr[j] * (dr[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            gq[at(i) + t] += ds * kd[at(j) + t];
                            gk[at(j) + t] += ds * qd[at(i) + t];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; rows * d]);
                slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}
