//! Forward kernels shared by inference and the training graph. Token
//! matrices hold one token per row.

use crate::numerics::rmatrix::gemm;
use crate::numerics::stats::{gauss_cdf, gauss_pdf};
use crate::numerics::RMatrix;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer norm. Returns `(output, normalized input, 1/std per row)`.
pub(crate) fn layer_norm(x: &RMatrix, gain: &[f64], bias: &[f64]) -> (RMatrix, RMatrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = RMatrix::zeros(rows, cols);
    let mut xhat = RMatrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for ((o, h), (g, b)) in out.row_mut(r).iter_mut().zip(&xh).zip(gain.iter().zip(bias)) {
            *o = h * g + b;
        }
    }
    (out, xhat, inv_std)
}

/// Exact GELU, `x Φ(x)`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    x * gauss_cdf(x)
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    gauss_cdf(x) + x * gauss_pdf(x)
}

pub(crate) fn gelu_matrix(x: &RMatrix) -> RMatrix {
    let data = x.as_slice().iter().map(|&v| gelu(v)).collect();
    RMatrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(x: &RMatrix) -> RMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[inline]
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - m).exp() };
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Geometry of a batch of equal-length sequences stacked row-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnShape {
    pub seq_len: usize,
    pub n_seq: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// Offset of the (sequence, head) probability block.
    pub fn prob_offset(&self, s: usize, h: usize) -> usize {
        (s * self.n_heads + h) * self.seq_len * self.seq_len
    }
}

/// Multi-head softmax attention. For each sequence and head, query token
/// `i` attends to key tokens `j` (only `j <= i` when causal) with weights
/// `softmax_j(k_j · q_i / sqrt(d))`. Returns the concatenated head outputs
/// and the attention weights, one `seq_len × seq_len` block (query-major)
/// per (sequence, head).
pub(crate) fn attention(q: &RMatrix, k: &RMatrix, v: &RMatrix, shape: AttnShape) -> (RMatrix, Vec<f64>) {
    let t = shape.seq_len;
    let d = shape.head_dim;
    let width = shape.n_heads * d;
    let mut out = RMatrix::zeros(q.rows(), width);
    let mut probs = vec![0.0; shape.n_seq * shape.n_heads * t * t];
    let scale = shape.scale();
    for s in 0..shape.n_seq {
        let r0 = s * t;
        for h in 0..shape.n_heads {
            let c0 = h * d;
            let off = shape.prob_offset(s, h);
            let block = &mut probs[off..off + t * t];
            {
                let mut scores = RMatrix::zeros(t, t);
                gemm(
                    scale,
                    q.view(false).block(r0, c0, t, d),
                    k.view(false).block(r0, c0, t, d).t(),
                    0.0,
                    scores.view_mut(),
                );
                block.copy_from_slice(scores.as_slice());
            }
            for i in 0..t {
                let row = &mut block[i * t..(i + 1) * t];
                if shape.causal {
                    for x in row.iter_mut().skip(i + 1) {
                        *x = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
            }
            let p = crate::numerics::rmatrix::MatRef {
                data: block,
                rows: t,
                cols: t,
                rs: t as isize,
                cs: 1,
            };
            gemm(
                1.0,
                p,
                v.view(false).block(r0, c0, t, d),
                0.0,
                out.view_mut().block(r0, c0, t, d),
            );
        }
    }
    (out, probs)
}
