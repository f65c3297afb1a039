use super::TrainConfig;
use crate::transformer::{ModelConfig, ModelParams};
use crate::{Error, Result};

/// Adam moment accumulators and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling applied before the moment update.
    pub clip_norm: Option<f64>,
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    /// Factor the gradient was multiplied by (1 when not clipped).
    pub clip_scale: f64,
}

fn zeroed(cfg: &ModelConfig) -> ModelParams {
    let mut p = ModelParams::zeros(cfg);
    for (_, t) in p.tensors_mut() {
        t.fill(0.0);
    }
    p
}

impl AdamState {
    pub fn new(cfg: &ModelConfig, lr: f64, beta1: f64, beta2: f64, epsilon: f64, clip_norm: Option<f64>) -> Self {
        Self {
            m: zeroed(cfg),
            v: zeroed(cfg),
            t: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            clip_norm,
        }
    }

    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        Self::new(&cfg.model, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.clip_norm)
    }
}

/// Global L2 norm over all tensors.
pub(crate) fn global_norm(p: &ModelParams) -> f64 {
    p.tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update at learning rate `state.lr`.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<StepReport> {
    let grad_norm = global_norm(grads);
    if !grad_norm.is_finite() {
        return Err(Error::InvalidArgument(format!("gradient norm is {grad_norm}")));
    }
    let clip_scale = match state.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(state.t as f64);
    let bc2 = 1.0 - b2.powf(state.t as f64);
    let (lr, eps) = (state.lr, state.epsilon);
    let pt = params.tensors_mut();
    let gt = grads.tensors();
    let mt = state.m.tensors_mut();
    let vt = state.v.tensors_mut();
    if pt.len() != gt.len() || pt.len() != mt.len() {
        return Err(Error::DimensionMismatch("parameter and gradient sets differ".into()));
    }
    for (((( name, p), (_, g)), (_, m)), (_, v)) in pt.into_iter().zip(gt).zip(mt).zip(vt) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                name,
                expected: vec![p.rows(), p.cols()],
                found: vec![g.rows(), g.cols()],
            });
        }
        let iter = p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
        for ((pv, gv), (mv, vv)) in iter {
            let gs = gv * clip_scale;
            *mv = b1 * *mv + (1.0 - b1) * gs;
            *vv = b2 * *vv + (1.0 - b2) * gs * gs;
            *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
        }
    }
    Ok(StepReport { grad_norm, clip_scale })
}
