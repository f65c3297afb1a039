//! The transformer loss expressed on a [`CompGraph`].

use super::graph::{CompGraph, NodeId};
use super::{LossPositions, TrainExample};
use crate::channel::Constellation;
use crate::numerics::RMatrix;
use crate::transformer::{stack_inputs, ModelConfig, ModelParams};
use crate::Result;

/// Target rows and weights for the selected y positions of each example.
pub(crate) struct LossLayout {
    pub rows: Vec<usize>,
    pub targets: RMatrix,
    pub weights: Vec<f64>,
}

/// Real coordinates `[Re x, Im x]` of a joint input.
pub(crate) fn real_target(x: &[crate::numerics::Complex]) -> Vec<f64> {
    x.iter().map(|z| z.re).chain(x.iter().map(|z| z.im)).collect()
}

/// `n_classes × 2 n_t` matrix whose row `c` is the real form of input `c`.
pub(crate) fn constellation_matrix(c: &Constellation) -> RMatrix {
    let width = 2 * c.n_t();
    let mut data = Vec::with_capacity(c.len() * width);
    for i in 0..c.len() {
        data.extend(real_target(c.input(i)));
    }
    RMatrix::from_vec(c.len(), width, data).expect("consistent")
}

pub(crate) fn loss_layout(
    examples: &[TrainExample],
    seq_len: usize,
    positions: LossPositions,
    scale: f64,
) -> LossLayout {
    let per = seq_len.div_ceil(2);
    let n = per - 1;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (s, ex) in examples.iter().enumerate() {
        let selected: Vec<usize> = match positions {
            LossPositions::AllY => (0..=n).collect(),
            LossPositions::FinalOnly => vec![n],
        };
        let w = scale / selected.len() as f64;
        for i in selected {
            rows.push(s * seq_len + 2 * i);
            let x = if i < n { &ex.context.pairs[i].x } else { &ex.x };
            targets.extend(real_target(x));
            weights.push(w);
        }
    }
    let width = targets.len() / rows.len().max(1);
    LossLayout {
        targets: RMatrix::from_vec(rows.len(), width, targets).expect("consistent"),
        rows,
        weights,
    }
}

/// Index of every tensor in [`ModelParams::tensors`] order.
pub(crate) struct ParamIndex;

impl ParamIndex {
    pub const EMBED: usize = 0;
    pub const POSITIONAL: usize = 1;
    pub fn layer(l: usize, k: usize) -> usize {
        2 + 8 * l + k
    }
    pub fn head_w(n_layers: usize) -> usize {
        2 + 8 * n_layers
    }
    pub fn head_b(n_layers: usize) -> usize {
        3 + 8 * n_layers
    }
}

/// Builds the loss graph for one chunk of examples. Each example's loss
/// term is multiplied by `scale`.
pub(crate) fn build(
    params: &ModelParams,
    cfg: &ModelConfig,
    constellation: &Constellation,
    examples: &[TrainExample],
    positions: LossPositions,
    scale: f64,
) -> Result<(CompGraph, NodeId)> {
    let (s, seq_len, n_seq) = stack_inputs(cfg, examples.iter().map(|e| (&e.context, e.y.as_slice())))?;
    let mut g = CompGraph::new();
    let inp = g.input(s)?;
    let m_e = g.param(ParamIndex::EMBED, params.embed.clone())?;
    let mut x = g.matmul(inp, false, m_e, true)?;
    if cfg.use_positional {
        let pos = g.param(ParamIndex::POSITIONAL, params.positional.clone())?;
        x = g.add_positional(x, pos, seq_len)?;
    }
    let shape = cfg.attn_shape(seq_len, n_seq);
    for (l, lp) in params.layers.iter().enumerate() {
        let w_q = g.param(ParamIndex::layer(l, 0), lp.w_q.clone())?;
        let w_k = g.param(ParamIndex::layer(l, 1), lp.w_k.clone())?;
        let w_v = g.param(ParamIndex::layer(l, 2), lp.w_v.clone())?;
        let w_o = g.param(ParamIndex::layer(l, 3), lp.w_o.clone())?;
        let w_1 = g.param(ParamIndex::layer(l, 4), lp.w_1.clone())?;
        let w_2 = g.param(ParamIndex::layer(l, 5), lp.w_2.clone())?;
        let gain = g.param(ParamIndex::layer(l, 6), lp.ln_gain.clone())?;
        let bias = g.param(ParamIndex::layer(l, 7), lp.ln_bias.clone())?;
        let q = g.matmul(x, false, w_q, true)?;
        let k = g.matmul(x, false, w_k, true)?;
        let v = g.matmul(x, false, w_v, true)?;
        let b = g.attention(q, k, v, shape)?;
        let a = g.matmul(b, false, w_o, false)?;
        let r = g.add(a, x)?;
        let ln = g.layer_norm(r, gain, bias)?;
        let f = g.matmul(ln, false, w_2, true)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, false, w_1, true)?;
        x = g.add(f, r)?;
    }
    let layout = loss_layout(examples, seq_len, positions, scale);
    let ys = g.gather_rows(x, layout.rows)?;
    let w_out = g.param(ParamIndex::head_w(cfg.n_layers), params.head_w.clone())?;
    let b_out = g.param(ParamIndex::head_b(cfg.n_layers), params.head_b.clone())?;
    let logits = g.matmul(ys, false, w_out, true)?;
    let logits = g.add_row(logits, b_out)?;
    let probs = g.softmax_rows(logits)?;
    let cm = g.input(constellation_matrix(constellation))?;
    let est = g.matmul(probs, false, cm, false)?;
    let loss = g.squared_error(est, layout.targets, layout.weights)?;
    Ok((g, loss))
}
