//! Decoder-only transformer equalizer: token embedding, stacked attention
//! and feed-forward layers, and a softmax head over the joint inputs.
//!
//! Token sequences are stored one token per row (the transpose of the
//! column-per-token convention), so a batch of equal-length sequences is a
//! single stacked matrix.

pub(crate) mod kernels;

use crate::channel::{Constellation, ContextSet};
use crate::numerics::rmatrix::gemm;
use crate::numerics::{Complex, RMatrix, RngStream};
use crate::{Error, Result};

use kernels::AttnShape;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_e: usize,
    pub d_f: usize,
    pub d_s: usize,
    pub n_max: usize,
    pub n_classes: usize,
    pub use_causal_mask: bool,
    pub use_positional: bool,
}

impl ModelConfig {
    /// 4-QAM configuration with `d_s` and `n_classes` derived from the
    /// antenna counts. Mask and positional embeddings are on.
    pub fn new(
        n_t: usize,
        n_r: usize,
        n_layers: usize,
        n_heads: usize,
        d_e: usize,
        d_f: usize,
        n_max: usize,
    ) -> Result<Self> {
        let cfg = Self {
            n_t,
            n_r,
            n_layers,
            n_heads,
            d_e,
            d_f,
            d_s: 2 * n_t.max(n_r),
            n_max,
            n_classes: 4usize.pow(n_t as u32),
            use_causal_mask: true,
            use_positional: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two layers, four heads, `d_e = 64`, `d_f = 128`, for a 2×2 link with
    /// contexts up to 20 pilots.
    pub fn full_scale() -> Self {
        Self::new(2, 2, 2, 4, 64, 128, 20).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_t == 0 || self.n_r == 0 {
            return bad("antenna counts must be positive".into());
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_e == 0 || self.d_f == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if !self.d_e.is_multiple_of(self.n_heads) {
            return bad(format!("d_e = {} not divisible by {} heads", self.d_e, self.n_heads));
        }
        if self.d_s < 2 * self.n_t.max(self.n_r) {
            return bad(format!("d_s = {} too small for the antenna counts", self.d_s));
        }
        if self.n_classes != 4usize.pow(self.n_t as u32) {
            return bad(format!("n_classes = {} does not match 4^{}", self.n_classes, self.n_t));
        }
        Ok(())
    }

    /// Per-head width, `d_e / H`.
    pub fn head_dim(&self) -> usize {
        self.d_e / self.n_heads
    }

    /// Number of positional columns, `2 n_max + 1`.
    pub fn n_positions(&self) -> usize {
        2 * self.n_max + 1
    }

    pub(crate) fn attn_shape(&self, seq_len: usize, n_seq: usize) -> AttnShape {
        AttnShape {
            seq_len,
            n_seq,
            n_heads: self.n_heads,
            head_dim: self.head_dim(),
            causal: self.use_causal_mask,
        }
    }
}

/// Weights of one attention layer. The per-head query, key and value
/// matrices are stacked by rows: head `h` owns rows `h d_w .. (h+1) d_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: RMatrix,
    pub w_k: RMatrix,
    pub w_v: RMatrix,
    pub w_o: RMatrix,
    pub w_1: RMatrix,
    pub w_2: RMatrix,
    pub ln_gain: RMatrix,
    pub ln_bias: RMatrix,
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: RMatrix,
    pub positional: RMatrix,
    pub layers: Vec<LayerParams>,
    pub head_w: RMatrix,
    pub head_b: RMatrix,
}

pub(crate) const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Zero weights except unit layer-norm gains.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d_e, d_f) = (cfg.d_e, cfg.d_f);
        let layer = LayerParams {
            w_q: RMatrix::zeros(d_e, d_e),
            w_k: RMatrix::zeros(d_e, d_e),
            w_v: RMatrix::zeros(d_e, d_e),
            w_o: RMatrix::zeros(d_e, d_e),
            w_1: RMatrix::zeros(d_e, d_f),
            w_2: RMatrix::zeros(d_f, d_e),
            ln_gain: RMatrix::from_fn(1, d_e, |_, _| 1.0),
            ln_bias: RMatrix::zeros(1, d_e),
        };
        Self {
            embed: RMatrix::zeros(d_e, cfg.d_s),
            positional: RMatrix::zeros(d_e, cfg.n_positions()),
            layers: vec![layer; cfg.n_layers],
            head_w: RMatrix::zeros(cfg.n_classes, d_e),
            head_b: RMatrix::zeros(1, cfg.n_classes),
        }
    }

    /// Weight matrices (positional table included) drawn i.i.d. from
    /// `N(0, 0.02²)`; layer-norm gain 1, biases 0.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(cfg);
        for (name, t) in p.tensors_mut() {
            if name.ends_with("ln_gain") || name.ends_with("ln_bias") || name == "head.b" {
                continue;
            }
            for v in t.as_mut_slice() {
                *v = rng.normal(0.0, INIT_STD);
            }
        }
        p
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &RMatrix)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("positional".to_string(), &self.positional)];
        for (l, lp) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer{l}.w_q"), &lp.w_q),
                (format!("layer{l}.w_k"), &lp.w_k),
                (format!("layer{l}.w_v"), &lp.w_v),
                (format!("layer{l}.w_o"), &lp.w_o),
                (format!("layer{l}.w_1"), &lp.w_1),
                (format!("layer{l}.w_2"), &lp.w_2),
                (format!("layer{l}.ln_gain"), &lp.ln_gain),
                (format!("layer{l}.ln_bias"), &lp.ln_bias),
            ]);
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut RMatrix)> {
        let mut out = vec![
            ("embed".to_string(), &mut self.embed),
            ("positional".to_string(), &mut self.positional),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            out.extend([
                (format!("layer{l}.w_q"), &mut lp.w_q),
                (format!("layer{l}.w_k"), &mut lp.w_k),
                (format!("layer{l}.w_v"), &mut lp.w_v),
                (format!("layer{l}.w_o"), &mut lp.w_o),
                (format!("layer{l}.w_1"), &mut lp.w_1),
                (format!("layer{l}.w_2"), &mut lp.w_2),
                (format!("layer{l}.ln_gain"), &mut lp.ln_gain),
                (format!("layer{l}.ln_bias"), &mut lp.ln_bias),
            ]);
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn n_tensors(&self) -> usize {
        4 + 8 * self.layers.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        let (a, b) = (self.tensors(), expected.tensors());
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch {
                name: "layers".into(),
                expected: vec![cfg.n_layers],
                found: vec![self.layers.len()],
            });
        }
        for ((name, t), (_, e)) in a.iter().zip(&b) {
            if t.shape() != e.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: vec![e.rows(), e.cols()],
                    found: vec![t.rows(), t.cols()],
                });
            }
        }
        Ok(())
    }
}

/// Embedded tokens of one sequence, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: RMatrix,
    pub n: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// `[Re v, Im v]` zero-padded to `d_s`.
pub fn realify(v: &[Complex], d_s: usize) -> Result<Vec<f64>> {
    if 2 * v.len() > d_s {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} does not fit d_s = {d_s}",
            v.len()
        )));
    }
    let mut out = vec![0.0; d_s];
    for (i, z) in v.iter().enumerate() {
        out[i] = z.re;
        out[v.len() + i] = z.im;
    }
    Ok(out)
}

/// Raw token inputs `(ỹ_1, x̃_1, …, ỹ_N, x̃_N, ỹ)` as rows of a
/// `(2N+1) × d_s` matrix.
pub fn token_inputs(cfg: &ModelConfig, context: &ContextSet, y: &[Complex]) -> Result<RMatrix> {
    let n = context.len();
    if n > cfg.n_max {
        return Err(Error::InvalidArgument(format!(
            "context of {n} pilots exceeds n_max = {}",
            cfg.n_max
        )));
    }
    let mut s = RMatrix::zeros(2 * n + 1, cfg.d_s);
    for (i, p) in context.pairs.iter().enumerate() {
        s.row_mut(2 * i).copy_from_slice(&realify(&p.y, cfg.d_s)?);
        s.row_mut(2 * i + 1).copy_from_slice(&realify(&p.x, cfg.d_s)?);
    }
    s.row_mut(2 * n).copy_from_slice(&realify(y, cfg.d_s)?);
    Ok(s)
}

/// Stacks token inputs of equal-length sequences.
pub(crate) fn stack_inputs<'a>(
    cfg: &ModelConfig,
    items: impl IntoIterator<Item = (&'a ContextSet, &'a [Complex])>,
) -> Result<(RMatrix, usize, usize)> {
    let mut data = Vec::new();
    let mut seq_len = None;
    let mut n_seq = 0;
    for (ctx, y) in items {
        let s = token_inputs(cfg, ctx, y)?;
        match seq_len {
            None => seq_len = Some(s.rows()),
            Some(t) if t != s.rows() => {
                return Err(Error::DimensionMismatch("batched contexts must share a length".into()))
            }
            _ => {}
        }
        data.extend_from_slice(s.as_slice());
        n_seq += 1;
    }
    let t = seq_len.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    Ok((RMatrix::from_vec(n_seq * t, cfg.d_s, data)?, t, n_seq))
}

/// `S M_eᵀ`, plus positional column `r mod seq_len` on row `r` when enabled.
pub(crate) fn embed_rows(params: &ModelParams, cfg: &ModelConfig, s: &RMatrix, seq_len: usize) -> RMatrix {
    let mut x = RMatrix::zeros(s.rows(), cfg.d_e);
    gemm(1.0, s.view(false), params.embed.view(true), 0.0, x.view_mut());
    if cfg.use_positional {
        add_positional(&mut x, &params.positional, seq_len);
    }
    x
}

pub(crate) fn add_positional(x: &mut RMatrix, pos: &RMatrix, seq_len: usize) {
    let d = x.cols();
    for r in 0..x.rows() {
        let p = r % seq_len;
        let row = x.row_mut(r);
        for (c, v) in row.iter_mut().enumerate().take(d) {
            *v += pos[(c, p)];
        }
    }
}

/// Embeds a context and query into tokens.
pub fn embed(params: &ModelParams, cfg: &ModelConfig, context: &ContextSet, y: &[Complex]) -> Result<TokenSequence> {
    let s = token_inputs(cfg, context, y)?;
    let t = s.rows();
    Ok(TokenSequence {
        tokens: embed_rows(params, cfg, &s, t),
        n: context.len(),
    })
}

/// One attention + feed-forward layer applied to stacked sequences.
pub(crate) fn layer_rows(lp: &LayerParams, cfg: &ModelConfig, e: &RMatrix, seq_len: usize) -> RMatrix {
    let rows = e.rows();
    let mm = |a: &RMatrix, b: &RMatrix, tb: bool, cols: usize| {
        let mut out = RMatrix::zeros(rows, cols);
        gemm(1.0, a.view(false), b.view(tb), 0.0, out.view_mut());
        out
    };
    let q = mm(e, &lp.w_q, true, cfg.d_e);
    let k = mm(e, &lp.w_k, true, cfg.d_e);
    let v = mm(e, &lp.w_v, true, cfg.d_e);
    let (b, _) = kernels::attention(&q, &k, &v, cfg.attn_shape(seq_len, rows / seq_len));
    let mut r = mm(&b, &lp.w_o, false, cfg.d_e);
    r.axpy(1.0, e);
    let (ln, _, _) = kernels::layer_norm(&r, lp.ln_gain.as_slice(), lp.ln_bias.as_slice());
    let hidden = kernels::gelu_matrix(&mm(&ln, &lp.w_2, true, cfg.d_f));
    let mut out = mm(&hidden, &lp.w_1, true, cfg.d_e);
    out.axpy(1.0, &r);
    out
}

/// Applies one layer to a token sequence.
pub fn attention_layer(e_prev: &TokenSequence, lp: &LayerParams, cfg: &ModelConfig) -> Result<TokenSequence> {
    if e_prev.tokens.cols() != cfg.d_e || e_prev.len() != 2 * e_prev.n + 1 {
        return Err(Error::DimensionMismatch("token sequence does not match the config".into()));
    }
    Ok(TokenSequence {
        tokens: layer_rows(lp, cfg, &e_prev.tokens, e_prev.len()),
        n: e_prev.n,
    })
}

/// Class probabilities and soft estimates at each query position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `N + 1` rows of `n_classes` probabilities; row `i` is the prediction
    /// for the `i`-th y token, which sees `i` context pairs.
    pub class_probs: Vec<Vec<f64>>,
    pub soft_estimates: Vec<Vec<Complex>>,
}

impl ForwardOutput {
    /// Estimate at the final query position.
    pub fn final_estimate(&self) -> &[Complex] {
        self.soft_estimates.last().expect("at least one position")
    }
}

/// Class probabilities at every y-token row of stacked sequences, one row
/// per y token in sequence order.
pub(crate) fn forward_probs_rows(params: &ModelParams, cfg: &ModelConfig, s: &RMatrix, seq_len: usize) -> RMatrix {
    let mut x = embed_rows(params, cfg, s, seq_len);
    for lp in &params.layers {
        x = layer_rows(lp, cfg, &x, seq_len);
    }
    let n_seq = s.rows() / seq_len;
    let per = seq_len.div_ceil(2);
    let mut ys = RMatrix::zeros(n_seq * per, cfg.d_e);
    for sq in 0..n_seq {
        for i in 0..per {
            ys.row_mut(sq * per + i).copy_from_slice(x.row(sq * seq_len + 2 * i));
        }
    }
    let mut logits = RMatrix::zeros(ys.rows(), cfg.n_classes);
    gemm(1.0, ys.view(false), params.head_w.view(true), 0.0, logits.view_mut());
    for r in 0..logits.rows() {
        for (l, b) in logits.row_mut(r).iter_mut().zip(params.head_b.as_slice()) {
            *l += b;
        }
    }
    kernels::softmax_rows(&logits)
}

/// Runs the model on one context and query.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    constellation: &Constellation,
    context: &ContextSet,
    y: &[Complex],
) -> Result<ForwardOutput> {
    check_constellation(cfg, constellation)?;
    let s = token_inputs(cfg, context, y)?;
    let t = s.rows();
    let probs = forward_probs_rows(params, cfg, &s, t);
    let class_probs: Vec<Vec<f64>> = (0..probs.rows()).map(|r| probs.row(r).to_vec()).collect();
    let soft_estimates = class_probs.iter().map(|p| constellation.weighted_mean(p)).collect();
    Ok(ForwardOutput {
        class_probs,
        soft_estimates,
    })
}

/// Final-position soft estimates for many equal-length (context, query)
/// pairs, evaluated as one stacked batch.
pub fn predict_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    constellation: &Constellation,
    items: &[(&ContextSet, &[Complex])],
) -> Result<Vec<Vec<Complex>>> {
    check_constellation(cfg, constellation)?;
    let (s, t, n_seq) = stack_inputs(cfg, items.iter().copied())?;
    let probs = forward_probs_rows(params, cfg, &s, t);
    let per = t.div_ceil(2);
    Ok((0..n_seq)
        .map(|sq| constellation.weighted_mean(probs.row(sq * per + per - 1)))
        .collect())
}

fn check_constellation(cfg: &ModelConfig, c: &Constellation) -> Result<()> {
    if c.len() != cfg.n_classes || c.n_t() != cfg.n_t {
        return Err(Error::DimensionMismatch(format!(
            "constellation with {} inputs does not match n_classes = {}",
            c.len(),
            cfg.n_classes
        )));
    }
    Ok(())
}

/// Probability-weighted mean of the joint inputs.
pub fn soft_estimate(probs: &[f64], constellation: &Constellation) -> Result<Vec<Complex>> {
    if probs.len() != constellation.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities for {} inputs",
            probs.len(),
            constellation.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "probabilities must be non-negative and sum to 1 (sum {total})"
        )));
    }
    Ok(constellation.weighted_mean(probs))
}

#[cfg(test)]
mod tests;
