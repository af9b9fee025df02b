//! Recorded-tape reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass together with
//! whatever the op needs for its vector-Jacobian product. [`Graph::backward`]
//! replays the tape in reverse. Parameters enter the tape by name from a
//! [`ParamStore`] and receive their gradients through
//! [`Graph::backward_into`].

use std::collections::HashMap;

use super::array::Tensor;
use super::kernels::{self, AttnDims, Mask};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sin(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    Gather { table: Var, idx: Vec<usize> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Attention inputs that are not differentiated: additive bias and mask.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnExtras<'a> {
    pub bias: Option<&'a Tensor>,
    pub mask: Option<&'a Mask>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameters are treated as constants; nothing is
    /// differentiable and no backward caches are kept.
    pub fn inference() -> Self {
        Self { no_grad: true, ..Self::default() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad: needs_grad && !self.no_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = !self.no_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Brings a named parameter onto the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let needs_grad = !self.no_grad && store.is_trainable(name)?;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let bt = &self.nodes[b.0].value;
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(Error::shape(format!("matmul {:?} x {:?}", self.shape(a), bt.shape())));
        }
        let n = bt.shape()[1];
        let out = kernels::matmul(self.value(a).data(), bt.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), ng, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("{name} {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_raw(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    /// Adds a row vector (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ta = self.value(a);
        let tr = self.value(row);
        let c = ta.cols();
        if tr.numel() != c {
            return Err(Error::shape(format!("add_row {:?} + {:?}", ta.shape(), tr.shape())));
        }
        let r = tr.data();
        let data = ta.data().chunks(c).flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y)).collect();
        let t = Tensor::from_raw(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::from_raw(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::from_raw(ta.shape().to_vec(), ta.data().iter().map(|&x| kernels::gelu(x)).collect());
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng, "gelu")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::from_raw(ta.shape().to_vec(), ta.data().iter().map(|x| x.sin()).collect());
        let ng = self.ng(a);
        self.push(t, Op::Sin(a), ng, "sin")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm affine width"));
        }
        let (xhat, rstd) = kernels::layer_norm_rows(tx.data(), c);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % c] + b[i % c]).collect();
        let t = Tensor::from_raw(tx.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, rstd) = if ng && !self.no_grad { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, "layer_norm")
    }

    /// Multi-head scaled dot-product attention; `q`, `k`, `v` hold all heads
    /// side by side along the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, extras: AttnExtras<'_>) -> Result<Var> {
        let (lq, qw) = self.mat_dims(q);
        let (lk, kw) = self.mat_dims(k);
        let (lv, vw) = self.mat_dims(v);
        if heads == 0 || qw != kw || lk != lv || qw % heads != 0 || vw % heads != 0 {
            return Err(Error::shape(format!("attention q {:?} k {:?} v {:?} heads {heads}", self.shape(q), self.shape(k), self.shape(v))));
        }
        let dims = AttnDims { heads, lq, lk, dk: qw / heads, dv: vw / heads };
        if let Some(b) = extras.bias {
            if b.numel() != heads * lq * lk {
                return Err(Error::shape(format!("attention bias {:?} for {heads}x{lq}x{lk}", b.shape())));
            }
        }
        if let Some(m) = extras.mask {
            if m.rows() != lq || m.cols() != lk {
                return Err(Error::shape(format!("attention mask {}x{} for {lq}x{lk}", m.rows(), m.cols())));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            extras.bias.map(Tensor::data),
            extras.mask,
            dims,
        )?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let probs = if ng { probs } else { Vec::new() };
        self.push(Tensor::from_raw(vec![lq, vw], out), Op::Attention { q, k, v, dims, probs }, ng, "attention")
    }

    /// Embedding lookup: rows `idx` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, c) = (tt.rows(), tt.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tt.row(i));
        }
        let ng = self.ng(table);
        self.push(Tensor::from_raw(vec![idx.len(), c], data), Op::Gather { table, idx: idx.to_vec() }, ng, "gather")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng, "reshape")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.mat_dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.mat_dims(p).1).collect();
        if parts.iter().any(|&p| self.mat_dims(p).0 != rows) {
            return Err(Error::shape("concat_cols with differing row counts"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_raw(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let t = Tensor::concat_rows(&parts.iter().map(|&p| self.value(p).clone()).collect::<Vec<_>>())?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        let ng = self.ng(x);
        self.push(t, Op::SliceRows { x, start }, ng, "slice_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    /// Mean absolute difference over all elements (L1 loss).
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mean_abs_diff", |x, y| (x - y).abs())?;
        let s = d.data().iter().sum::<f64>() / d.numel() as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::MeanAbsDiff(a, b), ng, "mean_abs_diff")
    }

    /// Mean squared difference over all elements (L2 loss).
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mean_sq_diff", |x, y| (x - y) * (x - y))?;
        let s = d.data().iter().sum::<f64>() / d.numel() as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::MeanSqDiff(a, b), ng, "mean_sq_diff")
    }

    /// Stop-gradient: same value, no gradient flows back.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Forward value is `replacement`; the backward pass copies the incoming
    /// gradient unchanged onto `a` (straight-through estimator).
    pub fn straight_through(&mut self, a: Var, replacement: Tensor) -> Result<Var> {
        if replacement.shape() != self.shape(a) {
            return Err(Error::shape("straight_through replacement shape"));
        }
        let ng = self.ng(a);
        self.push(replacement, Op::StraightThrough(a), ng, "straight_through")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
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

    /// Runs [`Graph::backward`] and adds each parameter's gradient into its
    /// accumulator in `store`. Parameters the loss does not reach get zero.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for name in &self.param_order {
            let v = self.params[name];
            if let Some(g) = grads.get(v) {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.value(*b).shape()[1];
                if self.ng(*a) {
                    send(grads, *a, kernels::matmul_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.ng(*b) {
                    send(grads, *b, kernels::matmul_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                send(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                send(grads, *a, g.to_vec());
                let c = self.value(*row).numel();
                let mut acc = vec![0.0; c];
                for chunk in g.chunks(c) {
                    acc.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                }
                send(grads, *row, acc);
            }
            Op::Scale(a, s) => send(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                send(grads, *a, g.iter().zip(va).map(|(x, &v)| x * kernels::gelu_grad(v)).collect());
            }
            Op::Sin(a) => {
                let va = self.value(*a).data();
                send(grads, *a, g.iter().zip(va).map(|(x, v)| x * v.cos()).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, inv) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = inv * (gr[j] * gam[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                send(grads, *x, dx);
                send(grads, *gamma, dgamma);
                send(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (gq, gk, gv) =
                    kernels::attention_backward(self.value(*q).data(), self.value(*k).data(), self.value(*v).data(), probs, g, *dims);
                send(grads, *q, gq);
                send(grads, *k, gk);
                send(grads, *v, gv);
            }
            Op::Gather { table, idx } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut acc = vec![0.0; tt.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    acc[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, x)| *a += x);
                }
                send(grads, *table, acc);
            }
            Op::Reshape(a) | Op::StraightThrough(a) => send(grads, *a, g.to_vec()),
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    send(grads, p, part);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut acc = vec![0.0; tx.numel()];
                acc[start * c..start * c + g.len()].copy_from_slice(g);
                send(grads, *x, acc);
            }
            Op::Sum(a) => send(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0] / va.len() as f64;
                let da: Vec<f64> = va.iter().zip(vb).map(|(x, y)| s * sign(x - y)).collect();
                let db = da.iter().map(|d| -d).collect();
                send(grads, *a, da);
                send(grads, *b, db);
            }
            Op::MeanSqDiff(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / va.len() as f64;
                let da: Vec<f64> = va.iter().zip(vb).map(|(x, y)| s * (x - y)).collect();
                let db = da.iter().map(|d| -d).collect();
                send(grads, *a, da);
                send(grads, *b, db);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
