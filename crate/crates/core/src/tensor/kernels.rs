//! Slice-level numeric kernels shared by the graph ops and the eager helpers.

use super::Tensor;
use crate::error::{Error, Result};

/// Boolean `[rows, cols]` attention mask; `true` marks an allowed position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(
                "attention_mask",
                format!("{rows}x{cols} mask with {} entries", allowed.len()),
            ));
        }
        Ok(AttentionMask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        AttentionMask {
            rows,
            cols,
            allowed,
        }
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

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Matrix of 0/1 entries, row-major; convenient for comparisons in tests.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.allows(i, j) as u8).collect())
            .collect()
    }
}

/// `c[n,m] = a[n,k] · b[k,m]`
pub(crate) fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `c[n,k] += a[n,m] · b[k,m]ᵀ`
pub(crate) fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k,m] += a[n,k]ᵀ · b[n,m]`
pub(crate) fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

pub(crate) struct AttentionDims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttentionDims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Multi-head masked softmax attention. Returns the output `[n,d]` and the
/// attention weights `[heads,n,m]` (exact zeros at masked positions).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &AttentionDims,
    mask: Option<&AttentionMask>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let AttentionDims { n, m, d, heads } = *dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * m];
    let mut scores = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..m {
                if let Some(mk) = mask {
                    if !mk.allows(i, j) {
                        continue;
                    }
                }
                any = true;
                let kj = &k[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                s *= scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            if !any {
                return Err(Error::EmptyMaskRow { row: i });
            }
            let prow = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            let mut total = 0.0;
            for j in 0..m {
                if mask.is_some_and(|mk| !mk.allows(i, j)) {
                    continue;
                }
                let e = (scores[j] - max).exp();
                prow[j] = e;
                total += e;
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..m {
                if prow[j] == 0.0 {
                    continue;
                }
                prow[j] /= total;
                let p = prow[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    Ok((out, probs))
}

pub(crate) struct AttentionGrads<'a> {
    pub dq: Option<&'a mut [f64]>,
    pub dk: Option<&'a mut [f64]>,
    pub dv: Option<&'a mut [f64]>,
}

pub(crate) fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dims: &AttentionDims,
    grads: AttentionGrads<'_>,
) {
    let AttentionDims { n, m, d, heads } = *dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let AttentionGrads {
        mut dq,
        mut dk,
        mut dv,
    } = grads;
    let mut dp = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let prow = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..m {
                let p = prow[j];
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for (a, b) in doi.iter().zip(vj) {
                    s += a * b;
                }
                dp[j] = s;
                weighted += p * s;
                if let Some(dv) = dv.as_deref_mut() {
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (g, x) in dvj.iter_mut().zip(doi) {
                        *g += p * x;
                    }
                }
            }
            for j in 0..m {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - weighted) * scale;
                if let Some(dq) = dq.as_deref_mut() {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for (g, x) in dqi.iter_mut().zip(kj) {
                        *g += ds * x;
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for (g, x) in dkj.iter_mut().zip(qi) {
                        *g += ds * x;
                    }
                }
            }
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns (output, normalized input, reciprocal std per row).
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let h = (xr[c] - mean) * rs;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

/// `y = x / |x|` per trailing-axis slice; returns (output, norms).
pub(crate) fn normalize_rows(x: &[f64], width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm { index: r });
        }
        norms[r] = norm;
        for c in 0..width {
            y[r * width + c] = xr[c] / norm;
        }
    }
    Ok((y, norms))
}

/// Eager `a[n,k] · b[k,m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(
        vec![n, m],
        a.dtype().promote(b.dtype()),
        mm(a.data(), b.data(), n, k, m),
    )
}

/// Single-head masked attention: `out[i] = Σ_j softmax_j(q_i·k_j/√d) v_j` over
/// allowed `j`. Disallowed positions receive exactly zero weight.
pub fn scaled_dot_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    check_attention_shapes(queries.shape(), keys.shape(), values.shape(), 1)?;
    let (n, d) = (queries.shape()[0], queries.shape()[1]);
    let m = keys.shape()[0];
    if mask.rows() != n || mask.cols() != m {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("mask {}x{} for {n}x{m} scores", mask.rows(), mask.cols()),
        ));
    }
    let dims = AttentionDims { n, m, d, heads: 1 };
    let (out, _) = attention_forward(queries.data(), keys.data(), values.data(), &dims, Some(mask))?;
    let dtype = queries
        .dtype()
        .promote(keys.dtype())
        .promote(values.dtype());
    Tensor::new(vec![n, d], dtype, out)
}

pub(crate) fn check_attention_shapes(
    q: &[usize],
    k: &[usize],
    v: &[usize],
    heads: usize,
) -> Result<()> {
    let ok = q.len() == 2
        && k.len() == 2
        && v.len() == 2
        && q[1] == k[1]
        && k == v
        && heads > 0
        && q[1].is_multiple_of(heads);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            "attention",
            format!("q {q:?}, k {k:?}, v {v:?}, heads {heads}"),
        ))
    }
}

/// Normalizes every trailing-axis slice to unit Euclidean length.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (y, _) = normalize_rows(x.data(), x.cols())?;
    Tensor::new(x.shape().to_vec(), x.dtype(), y)
}
