//! Reverse-mode gradients of the pre-training loss, the Adam optimizer, the
//! pre-training loop and checkpoint files.

mod adam;
mod checkpoint;
pub mod graph;
pub(crate) mod model_graph;
mod pretrain;

pub use adam::{adam_step, AdamState, StepReport};
pub use checkpoint::{load_checkpoint, load_params_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{CompGraph, NodeId};
pub use pretrain::{pretrain, pretrain_with_progress, sample_example, PretrainTaskSet, RunOptions, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::channel::{db_to_linear, linear_to_db, Constellation, ContextSet, TaskDistributionSpec};
use crate::numerics::{Complex, RMatrix};
use crate::transformer::{forward_probs_rows, stack_inputs, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Which query positions enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossPositions {
    /// Every y token, position `i` predicting with `i` context pairs.
    #[default]
    AllY,
    /// Only the final query.
    FinalOnly,
}

impl FromStr for LossPositions {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all_y" | "all-y" => Ok(Self::AllY),
            "final_only" | "final-only" => Ok(Self::FinalOnly),
            _ => Err(Error::Config(format!("unknown loss_positions `{s}`"))),
        }
    }
}

impl fmt::Display for LossPositions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllY => "all_y",
            Self::FinalOnly => "final_only",
        })
    }
}

/// One training sequence: a context, the test input and its observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub context: ContextSet,
    pub x: Vec<Complex>,
    pub y: Vec<Complex>,
}

/// Everything that determines a pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task_spec: TaskDistributionSpec,
    pub bits: Option<u32>,
    pub m_tasks: usize,
    pub n_context: usize,
    pub batch_size: usize,
    pub n_steps: usize,
    pub lr: f64,
    /// Linear warmup length; 0 gives a constant rate.
    pub warmup_steps: usize,
    /// After warmup, decay linearly to zero at `n_steps`.
    pub lr_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
    pub loss_positions: LossPositions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::full_scale(),
            task_spec: TaskDistributionSpec::fixed(2, 2, 0.1),
            bits: Some(4),
            m_tasks: 4096,
            n_context: 20,
            batch_size: 64,
            n_steps: 50_000,
            lr: 1e-4,
            warmup_steps: 1000,
            lr_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            loss_positions: LossPositions::AllY,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub(crate) fn parse_bits(value: &str) -> Result<Option<u32>> {
    match value.trim().to_ascii_lowercase().as_str() {
        "inf" | "none" | "unquantized" => Ok(None),
        v => parse("bits", v).map(Some),
    }
}

pub(crate) fn format_bits(bits: Option<u32>) -> String {
    bits.map_or_else(|| "inf".to_string(), |b| b.to_string())
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value.trim() {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainConfig {
    /// Field names understood by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "n_t",
        "n_r",
        "n_layers",
        "n_heads",
        "d_e",
        "d_f",
        "n_max",
        "use_causal_mask",
        "use_positional",
        "sigma2_db_min",
        "sigma2_db_max",
        "sigma2",
        "bits",
        "m_tasks",
        "n_context",
        "batch_size",
        "n_steps",
        "lr",
        "warmup_steps",
        "lr_decay",
        "beta1",
        "beta2",
        "epsilon",
        "clip_norm",
        "loss_positions",
        "seed",
    ];

    /// Sets one field from its text form. `sigma2` is a linear noise
    /// variance that fixes both ends of the dB range. Call
    /// [`TrainConfig::finalize`] after a series of updates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "n_t" => m.n_t = parse(key, value)?,
            "n_r" => m.n_r = parse(key, value)?,
            "n_layers" => m.n_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "d_e" => m.d_e = parse(key, value)?,
            "d_f" => m.d_f = parse(key, value)?,
            "n_max" => m.n_max = parse(key, value)?,
            "use_causal_mask" => m.use_causal_mask = parse(key, value)?,
            "use_positional" => m.use_positional = parse(key, value)?,
            "sigma2_db_min" => self.task_spec.sigma2_db_min = parse(key, value)?,
            "sigma2_db_max" => self.task_spec.sigma2_db_max = parse(key, value)?,
            "sigma2" => {
                let s: f64 = parse(key, value)?;
                self.task_spec.sigma2_db_min = linear_to_db(s);
                self.task_spec.sigma2_db_max = linear_to_db(s);
            }
            "bits" => self.bits = parse_bits(value)?,
            "m_tasks" => self.m_tasks = parse(key, value)?,
            "n_context" => self.n_context = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "n_steps" => self.n_steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse_opt_f64(key, value)?,
            "loss_positions" => self.loss_positions = value.trim().parse()?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Recomputes derived sizes, syncs antenna counts into the task
    /// distribution, and validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.model.d_s = 2 * self.model.n_t.max(self.model.n_r);
        self.model.n_classes = 4usize.pow(self.model.n_t as u32);
        self.task_spec.n_t = self.model.n_t;
        self.task_spec.n_r = self.model.n_r;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task_spec.validate()?;
        if self.task_spec.n_t != self.model.n_t || self.task_spec.n_r != self.model.n_r {
            return Err(Error::Config("task and model antenna counts differ".into()));
        }
        if self.m_tasks == 0 || self.batch_size == 0 {
            return Err(Error::Config("m_tasks and batch_size must be at least 1".into()));
        }
        if self.n_context > self.model.n_max {
            return Err(Error::Config(format!(
                "n_context = {} exceeds n_max = {}",
                self.n_context, self.model.n_max
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        if !(self.epsilon > 0.0) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("epsilon and clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Every field as `(key, value)` text; [`TrainConfig::set`] reads them
    /// back exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let v: Vec<(&str, String)> = vec![
            ("n_t", m.n_t.to_string()),
            ("n_r", m.n_r.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_e", m.d_e.to_string()),
            ("d_f", m.d_f.to_string()),
            ("n_max", m.n_max.to_string()),
            ("use_causal_mask", m.use_causal_mask.to_string()),
            ("use_positional", m.use_positional.to_string()),
            ("sigma2_db_min", self.task_spec.sigma2_db_min.to_string()),
            ("sigma2_db_max", self.task_spec.sigma2_db_max.to_string()),
            ("bits", format_bits(self.bits)),
            ("m_tasks", self.m_tasks.to_string()),
            ("n_context", self.n_context.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_steps", self.n_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("clip_norm", self.clip_norm.map_or("none".to_string(), |c| c.to_string())),
            ("loss_positions", self.loss_positions.to_string()),
            ("seed", self.seed.to_string()),
        ];
        v.into_iter().map(|(k, val)| (k.to_string(), val)).collect()
    }

    /// Starts from the defaults and applies `pairs` in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Learning rate at (zero-based) step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.lr;
        if self.warmup_steps > 0 {
            lr *= ((step + 1) as f64 / self.warmup_steps as f64).min(1.0);
        }
        if self.lr_decay && step >= self.warmup_steps && self.n_steps > self.warmup_steps {
            lr *= (self.n_steps - step) as f64 / (self.n_steps - self.warmup_steps) as f64;
        }
        lr
    }

    /// Fixed noise variance, if the task distribution has one.
    pub fn fixed_sigma2(&self) -> Option<f64> {
        (self.task_spec.sigma2_db_min == self.task_spec.sigma2_db_max)
            .then(|| db_to_linear(self.task_spec.sigma2_db_min))
    }
}

fn check_batch(batch: &[TrainExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Per-position squared errors `‖x̂_i − x_i‖²`, averaged over the batch,
/// computed with the inference forward pass.
pub fn position_losses(params: &ModelParams, cfg: &ModelConfig, batch: &[TrainExample]) -> Result<Vec<f64>> {
    check_batch(batch)?;
    let cons = Constellation::qam4(cfg.n_t);
    let (s, t, n_seq) = stack_inputs(cfg, batch.iter().map(|e| (&e.context, e.y.as_slice())))?;
    let probs = forward_probs_rows(params, cfg, &s, t);
    let per = t.div_ceil(2);
    let mut out = vec![0.0; per];
    for (sq, ex) in batch.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            let est = cons.weighted_mean(probs.row(sq * per + i));
            let x = if i + 1 < per { &ex.context.pairs[i].x } else { &ex.x };
            *o += est.iter().zip(x).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        }
    }
    for o in out.iter_mut() {
        *o /= n_seq as f64;
    }
    Ok(out)
}

/// Mean over the batch of the squared-error objective.
pub fn batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[TrainExample],
    positions: LossPositions,
) -> Result<f64> {
    let per = position_losses(params, cfg, batch)?;
    Ok(match positions {
        LossPositions::AllY => per.iter().sum::<f64>() / per.len() as f64,
        LossPositions::FinalOnly => *per.last().expect("non-empty"),
    })
}

/// Loss and its gradient with respect to every parameter tensor.
pub fn gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[TrainExample],
    positions: LossPositions,
) -> Result<(f64, ModelParams)> {
    gradient_chunked(params, cfg, batch, positions, 1)
}

/// As [`gradient`], splitting the batch into `chunks` graphs evaluated in
/// parallel on the current rayon pool and summed in chunk order.
pub fn gradient_chunked(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[TrainExample],
    positions: LossPositions,
    chunks: usize,
) -> Result<(f64, ModelParams)> {
    check_batch(batch)?;
    let cons = Constellation::qam4(cfg.n_t);
    let scale = 1.0 / batch.len() as f64;
    let size = batch.len().div_ceil(chunks.max(1));
    let n_params = params.n_tensors();
    let run = |chunk: &[TrainExample]| -> Result<(f64, Vec<Option<RMatrix>>)> {
        let (g, loss) = model_graph::build(params, cfg, &cons, chunk, positions, scale)?;
        let grads = g.backward(loss, n_params)?;
        Ok((g.value(loss)[(0, 0)], grads))
    };
    let parts: Vec<Result<(f64, Vec<Option<RMatrix>>)>> = if chunks <= 1 {
        vec![run(batch)]
    } else {
        batch.par_chunks(size).map(run).collect()
    };
    let mut total = 0.0;
    let mut grads = ModelParams::zeros(cfg);
    for (_, t) in grads.tensors_mut() {
        t.fill(0.0);
    }
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        for ((_, acc), gi) in grads.tensors_mut().into_iter().zip(g) {
            if let Some(gi) = gi {
                acc.axpy(1.0, &gi);
            }
        }
    }
    Ok((total, grads))
}
