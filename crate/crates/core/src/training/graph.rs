//! Tape-based reverse-mode differentiation over matrix-valued nodes.

use crate::numerics::rmatrix::{gemm, MatMut, MatRef};
use crate::numerics::RMatrix;
use crate::transformer::kernels::{self, AttnShape};
use crate::{Error, Result};

/// Handle to a node of a [`CompGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul { a: NodeId, ta: bool, b: NodeId, tb: bool },
    Add(NodeId, NodeId),
    AddRow { x: NodeId, bias: NodeId },
    AddPositional { x: NodeId, pos: NodeId, seq_len: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: RMatrix, inv_std: Vec<f64> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, shape: AttnShape, probs: Vec<f64> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    SoftmaxRows(NodeId),
    SquaredError { est: NodeId, target: RMatrix, weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::AddPositional { .. } => "add_positional",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SquaredError { .. } => "squared_error",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: RMatrix,
    needs_grad: bool,
}

/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the tape is acyclic by construction.
#[derive(Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

fn mat(data: &[f64], rows: usize, cols: usize) -> MatRef<'_> {
    MatRef {
        data,
        rows,
        cols,
        rs: cols as isize,
        cs: 1,
    }
}

fn mat_mut(data: &mut [f64], rows: usize, cols: usize) -> MatMut<'_> {
    MatMut {
        data,
        rows,
        cols,
        rs: cols as isize,
        cs: 1,
    }
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &RMatrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: RMatrix, needs_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(id))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: RMatrix) -> Result<NodeId> {
        self.push(Op::Input, value, false)
    }

    /// Trainable leaf; its gradient is reported under `index`.
    pub fn param(&mut self, index: usize, value: RMatrix) -> Result<NodeId> {
        self.push(Op::Param(index), value, true)
    }

    /// `op(a) op(b)` where `op` transposes when the flag is set.
    pub fn matmul(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let value = RMatrix::matmul(self.value(a), ta, self.value(b), tb)?;
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul { a, ta, b, tb }, value, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::DimensionMismatch(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        value.axpy(1.0, vb);
        let ng = self.needs(&[a, b]);
        self.push(Op::Add(a, b), value, ng)
    }

    /// Adds the `1 × cols` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != self.value(x).cols() {
            return Err(Error::DimensionMismatch("bias row width".into()));
        }
        let b = b.as_slice().to_vec();
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let ng = self.needs(&[x, bias]);
        self.push(Op::AddRow { x, bias }, value, ng)
    }

    /// Adds column `r mod seq_len` of the `cols × P` table `pos` to row `r`.
    pub fn add_positional(&mut self, x: NodeId, pos: NodeId, seq_len: usize) -> Result<NodeId> {
        let (vx, vp) = (self.value(x), self.value(pos));
        if vp.rows() != vx.cols() || vp.cols() < seq_len {
            return Err(Error::DimensionMismatch("positional table too small".into()));
        }
        let mut value = vx.clone();
        crate::transformer::add_positional(&mut value, vp, seq_len);
        let ng = self.needs(&[x, pos]);
        self.push(Op::AddPositional { x, pos, seq_len }, value, ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (value, xhat, inv_std) = kernels::layer_norm(
            self.value(x),
            self.value(gain).as_slice(),
            self.value(bias).as_slice(),
        );
        let ng = self.needs(&[x, gain, bias]);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, value, ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::gelu_matrix(self.value(x));
        let ng = self.needs(&[x]);
        self.push(Op::Gelu(x), value, ng)
    }

    /// Multi-head attention over stacked sequences.
    pub(crate) fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, shape: AttnShape) -> Result<NodeId> {
        let (value, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), shape);
        let ng = self.needs(&[q, k, v]);
        self.push(Op::Attention { q, k, v, shape, probs }, value, ng)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let vx = self.value(x);
        if rows.iter().any(|&r| r >= vx.rows()) {
            return Err(Error::DimensionMismatch("gather row out of range".into()));
        }
        let value = RMatrix::from_fn(rows.len(), vx.cols(), |r, c| vx[(rows[r], c)]);
        let ng = self.needs(&[x]);
        self.push(Op::GatherRows { x, rows }, value, ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::softmax_rows(self.value(x));
        let ng = self.needs(&[x]);
        self.push(Op::SoftmaxRows(x), value, ng)
    }

    /// Scalar `Σ_r weights[r] ‖est_r − target_r‖²`.
    pub fn squared_error(&mut self, est: NodeId, target: RMatrix, weights: Vec<f64>) -> Result<NodeId> {
        let ve = self.value(est);
        if ve.shape() != target.shape() || weights.len() != ve.rows() {
            return Err(Error::DimensionMismatch("squared error operands".into()));
        }
        let mut loss = 0.0;
        for (r, w) in weights.iter().enumerate() {
            let d: f64 = ve.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            loss += w * d;
        }
        let ng = self.needs(&[est]);
        self.push(Op::SquaredError { est, target, weights }, RMatrix::from_vec(1, 1, vec![loss])?, ng)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// leaf, indexed by parameter index. Parameters that the loss does not
    /// reach get `None`.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Vec<Option<RMatrix>>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument("backward needs a scalar node".into()));
        }
        let mut grads: Vec<Option<RMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(RMatrix::from_vec(1, 1, vec![1.0])?);
        let mut out: Vec<Option<RMatrix>> = (0..n_params).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.is_finite() {
                return Err(Error::NonFinite { node: id, op: node.op.name() });
            }
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    let slot = out
                        .get_mut(*i)
                        .ok_or_else(|| Error::InvalidArgument(format!("parameter index {i} out of range")))?;
                    match slot {
                        Some(acc) => acc.axpy(1.0, &g),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul { a, ta, b, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let acc = slot(&mut grads, *a, va.shape());
                        if *ta {
                            gemm(1.0, vb.view(*tb), g.view(true), 1.0, acc.view_mut());
                        } else {
                            gemm(1.0, g.view(false), vb.view(!*tb), 1.0, acc.view_mut());
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let acc = slot(&mut grads, *b, vb.shape());
                        if *tb {
                            gemm(1.0, g.view(true), va.view(*ta), 1.0, acc.view_mut());
                        } else {
                            gemm(1.0, va.view(!*ta), g.view(false), 1.0, acc.view_mut());
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [a, b] {
                        if self.nodes[x.0].needs_grad {
                            slot(&mut grads, *x, g.shape()).axpy(1.0, &g);
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    if self.nodes[bias.0].needs_grad {
                        let acc = slot(&mut grads, *bias, (1, g.cols()));
                        for r in 0..g.rows() {
                            for (a, v) in acc.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        slot(&mut grads, *x, g.shape()).axpy(1.0, &g);
                    }
                }
                Op::AddPositional { x, pos, seq_len } => {
                    if self.nodes[pos.0].needs_grad {
                        let acc = slot(&mut grads, *pos, self.value(*pos).shape());
                        for r in 0..g.rows() {
                            let p = r % seq_len;
                            for (c, v) in g.row(r).iter().enumerate() {
                                acc[(c, p)] += v;
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        slot(&mut grads, *x, g.shape()).axpy(1.0, &g);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gn = self.value(*gain).as_slice();
                    let cols = g.cols();
                    if self.nodes[gain.0].needs_grad {
                        let acc = slot(&mut grads, *gain, (1, cols));
                        for r in 0..g.rows() {
                            for ((a, d), h) in acc.as_mut_slice().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *a += d * h;
                            }
                        }
                    }
                    if self.nodes[bias.0].needs_grad {
                        let acc = slot(&mut grads, *bias, (1, cols));
                        for r in 0..g.rows() {
                            for (a, d) in acc.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *a += d;
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let acc = slot(&mut grads, *x, g.shape());
                        let mut dh = vec![0.0; cols];
                        for r in 0..g.rows() {
                            for ((o, d), s) in dh.iter_mut().zip(g.row(r)).zip(gn) {
                                *o = d * s;
                            }
                            let h = xhat.row(r);
                            let m1 = dh.iter().sum::<f64>() / cols as f64;
                            let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for ((a, d), hh) in acc.row_mut(r).iter_mut().zip(&dh).zip(h) {
                                *a += inv_std[r] * (d - m1 - hh * m2);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if self.nodes[x.0].needs_grad {
                        let vx = self.value(*x).as_slice();
                        let acc = slot(&mut grads, *x, g.shape());
                        for ((a, d), v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vx) {
                            *a += d * kernels::gelu_grad(*v);
                        }
                    }
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        *shape,
                    );
                    for (id, d) in [(q, dq), (k, dk), (v, dv)] {
                        if self.nodes[id.0].needs_grad {
                            slot(&mut grads, *id, d.shape()).axpy(1.0, &d);
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    if self.nodes[x.0].needs_grad {
                        let acc = slot(&mut grads, *x, self.value(*x).shape());
                        for (i, &r) in rows.iter().enumerate() {
                            for (a, d) in acc.row_mut(r).iter_mut().zip(g.row(i)) {
                                *a += d;
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.nodes[x.0].needs_grad {
                        let p = &node.value;
                        let acc = slot(&mut grads, *x, g.shape());
                        for r in 0..g.rows() {
                            let dot: f64 = p.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                            for ((a, pp), d) in acc.row_mut(r).iter_mut().zip(p.row(r)).zip(g.row(r)) {
                                *a += pp * (d - dot);
                            }
                        }
                    }
                }
                Op::SquaredError { est, target, weights } => {
                    if self.nodes[est.0].needs_grad {
                        let s = g[(0, 0)];
                        let ve = self.value(*est);
                        let acc = slot(&mut grads, *est, ve.shape());
                        for (r, w) in weights.iter().enumerate() {
                            for ((a, e), t) in acc.row_mut(r).iter_mut().zip(ve.row(r)).zip(target.row(r)) {
                                *a += 2.0 * w * s * (e - t);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<RMatrix>], id: NodeId, shape: (usize, usize)) -> &mut RMatrix {
    grads[id.0].get_or_insert_with(|| RMatrix::zeros(shape.0, shape.1))
}

/// Reverse pass of [`kernels::attention`]. With `P` the weights and `dO` the
/// output gradient of one head: `dV = Pᵀ dO`, `dS = P ∘ (dO Vᵀ − rowsum)`,
/// `dQ = s dS K`, `dK = s dSᵀ Q`.
fn attention_backward(
    q: &RMatrix,
    k: &RMatrix,
    v: &RMatrix,
    probs: &[f64],
    dout: &RMatrix,
    shape: AttnShape,
) -> (RMatrix, RMatrix, RMatrix) {
    let t = shape.seq_len;
    let d = shape.head_dim;
    let scale = shape.scale();
    let mut dq = RMatrix::zeros(q.rows(), q.cols());
    let mut dk = RMatrix::zeros(k.rows(), k.cols());
    let mut dv = RMatrix::zeros(v.rows(), v.cols());
    let mut dp = vec![0.0; t * t];
    for s in 0..shape.n_seq {
        let r0 = s * t;
        for h in 0..shape.n_heads {
            let c0 = h * d;
            let off = shape.prob_offset(s, h);
            let p = &probs[off..off + t * t];
            let dob = dout.view(false).block(r0, c0, t, d);
            gemm(1.0, mat(p, t, t).t(), dob, 0.0, dv.view_mut().block(r0, c0, t, d));
            gemm(
                1.0,
                dob,
                v.view(false).block(r0, c0, t, d).t(),
                0.0,
                mat_mut(&mut dp, t, t),
            );
            for i in 0..t {
                let row = &mut dp[i * t..(i + 1) * t];
                let pr = &p[i * t..(i + 1) * t];
                let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, pp) in row.iter_mut().zip(pr) {
                    *x = pp * (*x - dot);
                }
            }
            gemm(
                scale,
                mat(&dp, t, t),
                k.view(false).block(r0, c0, t, d),
                0.0,
                dq.view_mut().block(r0, c0, t, d),
            );
            gemm(
                scale,
                mat(&dp, t, t).t(),
                q.view(false).block(r0, c0, t, d),
                0.0,
                dk.view_mut().block(r0, c0, t, d),
            );
        }
    }
    (dq, dk, dv)
}
