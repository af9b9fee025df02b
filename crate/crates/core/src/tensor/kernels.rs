//! Dense kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Boolean admission matrix for attention: `allowed[i * cols + j]` says
/// whether query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(format!("mask {rows}x{cols} got {} entries", allowed.len())));
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|idx| f(idx / cols, idx % cols)).collect();
        Self { rows, cols, allowed }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Shapes of a multi-head attention call. `q` is `[lq, heads*dk]`, `k` is
/// `[lk, heads*dk]`, `v` is `[lk, heads*dv]`, the optional bias is
/// `[heads, lq, lk]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub dk: usize,
    pub dv: usize,
}

/// Forward pass. Returns the output `[lq, heads*dv]` and the softmax
/// weights `[heads, lq, lk]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: Option<&[f64]>,
    mask: Option<&Mask>,
    d: AttnDims,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let AttnDims { heads, lq, lk, dk, dv } = d;
    let scale = 1.0 / (dk as f64).sqrt();
    let qw = heads * dk;
    let vw = heads * dv;
    let mut probs = vec![0.0; heads * lq * lk];
    let mut out = vec![0.0; lq * vw];
    for h in 0..heads {
        for i in 0..lq {
            let qi = &q[i * qw + h * dk..i * qw + (h + 1) * dk];
            let row = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in row.iter_mut().enumerate() {
                if mask.is_some_and(|m| !m.allows(i, j)) {
                    *slot = f64::NEG_INFINITY;
                    continue;
                }
                let kj = &k[j * qw + h * dk..j * qw + (h + 1) * dk];
                let mut logit = dot(qi, kj) * scale;
                if let Some(b) = bias {
                    logit += b[(h * lq + i) * lk + j];
                }
                *slot = logit;
                max = max.max(logit);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention { row: i });
            }
            let mut total = 0.0;
            for slot in row.iter_mut() {
                *slot = if *slot == f64::NEG_INFINITY { 0.0 } else { (*slot - max).exp() };
                total += *slot;
            }
            let out_row = &mut out[i * vw + h * dv..i * vw + (h + 1) * dv];
            for (j, p) in row.iter_mut().enumerate() {
                *p /= total;
                if *p == 0.0 {
                    continue;
                }
                let vj = &v[j * vw + h * dv..j * vw + (h + 1) * dv];
                for (o, &x) in out_row.iter_mut().zip(vj) {
                    *o += *p * x;
                }
            }
        }
    }
    Ok((out, probs))
}

/// Backward pass given the saved softmax weights. Returns `(dq, dk, dv)`.
pub fn attention_backward(q: &[f64], k: &[f64], v: &[f64], probs: &[f64], grad_out: &[f64], d: AttnDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims { heads, lq, lk, dk, dv } = d;
    let scale = 1.0 / (dk as f64).sqrt();
    let qw = heads * dk;
    let vw = heads * dv;
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; lk];
    for h in 0..heads {
        for i in 0..lq {
            let p_row = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let go = &grad_out[i * vw + h * dv..i * vw + (h + 1) * dv];
            let mut weighted = 0.0;
            for j in 0..lk {
                if p_row[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &v[j * vw + h * dv..j * vw + (h + 1) * dv];
                dp[j] = dot(go, vj);
                weighted += dp[j] * p_row[j];
                let gvj = &mut gv[j * vw + h * dv..j * vw + (h + 1) * dv];
                for (g, &x) in gvj.iter_mut().zip(go) {
                    *g += p_row[j] * x;
                }
            }
            let qi_off = i * qw + h * dk;
            for j in 0..lk {
                if p_row[j] == 0.0 {
                    continue;
                }
                let ds = p_row[j] * (dp[j] - weighted) * scale;
                let kj_off = j * qw + h * dk;
                for c in 0..dk {
                    gq[qi_off + c] += ds * k[kj_off + c];
                    gk[kj_off + c] += ds * q[qi_off + c];
                }
            }
        }
    }
    (gq, gk, gv)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row; returns `(normalized, reciprocal std per row)`.
pub fn layer_norm_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = inv;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.5).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        for r in 0..3 {
            for s in 0..4 {
                bt[s * 3 + r] = b[r * 4 + s];
            }
        }
        let c_nt = matmul_nt(&a, &bt, 2, 3, 4);
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for s in 0..3 {
                at[s * 2 + r] = a[r * 3 + s];
            }
        }
        let c_tn = matmul_tn(&at, &b, 3, 2, 4);
        for i in 0..8 {
            assert!((c[i] - c_nt[i]).abs() < 1e-14);
            assert!((c[i] - c_tn[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        let d = AttnDims { heads: 1, lq: 2, lk: 2, dk: 1, dv: 1 };
        let err = attention_forward(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], None, Some(&mask), d);
        assert!(matches!(err, Err(Error::DegenerateAttention { row: 1 })));
    }
}
