use super::{adam_step, gradient_chunked, AdamState, TrainConfig, TrainExample};
use crate::channel::{
    apply_channel, sample_context, sample_task, Constellation, Quantizer, Task, TaskDistributionSpec,
};
use crate::numerics::RngStream;
use crate::transformer::ModelParams;
use crate::{Error, Result};

const TAG_TASKS: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_STEPS: u64 = 3;

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// The `M` pre-training tasks, sampled once and then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTaskSet {
    pub tasks: Vec<Task>,
}

impl PretrainTaskSet {
    pub fn sample(spec: &TaskDistributionSpec, m: usize, rng: &mut RngStream) -> Self {
        Self {
            tasks: (0..m).map(|_| sample_task(spec, rng)).collect(),
        }
    }

    /// The task set a run with this config trains on.
    pub fn for_config(cfg: &TrainConfig) -> Self {
        let mut rng = RngStream::new(cfg.seed, 0).derive(TAG_TASKS);
        Self::sample(&cfg.task_spec, cfg.m_tasks, &mut rng)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Threading of the gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub threads: usize,
    /// Single chunk, single thread: bit-reproducible results.
    pub deterministic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            deterministic: true,
        }
    }
}

impl RunOptions {
    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = if self.deterministic { 1 } else { self.threads.max(1) };
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
    }

    pub(crate) fn chunks(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// `(step, training loss)` for every step.
    pub curve: Vec<(usize, f64)>,
    pub task_set: PretrainTaskSet,
}

/// A fresh context and test pair for a task.
pub fn sample_example(
    task: &Task,
    q: &Quantizer,
    constellation: &Constellation,
    n_context: usize,
    rng: &mut RngStream,
) -> TrainExample {
    let context = sample_context(task, q, constellation, n_context, rng);
    let x = constellation.input(rng.index(constellation.len())).to_vec();
    let y = apply_channel(task, q, &x, rng);
    TrainExample { context, x, y }
}

/// Draws batch element `b` of step `step`. Each element owns a stream
/// derived from the step, so the data do not depend on threading.
fn draw(
    cfg: &TrainConfig,
    set: &PretrainTaskSet,
    q: &Quantizer,
    cons: &Constellation,
    steps: &RngStream,
    step: usize,
    b: usize,
) -> TrainExample {
    let mut rng = steps.derive(step as u64).derive(b as u64);
    let task = &set.tasks[rng.index(set.len())];
    sample_example(task, q, cons, cfg.n_context, &mut rng)
}

pub fn pretrain(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    pretrain_with_progress(cfg, opts, |_, _, _| {})
}

/// Runs pre-training, calling `progress(step, loss, params)` after every
/// step with the updated parameters.
pub fn pretrain_with_progress(
    cfg: &TrainConfig,
    opts: &RunOptions,
    mut progress: impl FnMut(usize, f64, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, 0);
    let task_set = PretrainTaskSet::for_config(cfg);
    let mut params = ModelParams::init(&cfg.model, &mut root.derive(TAG_INIT));
    let steps = root.derive(TAG_STEPS);
    let q = Quantizer::from_bits(cfg.bits);
    let cons = Constellation::qam4(cfg.model.n_t);
    let mut adam = AdamState::from_train_config(cfg);
    let pool = opts.pool()?;
    let chunks = opts.chunks();
    let mut curve = Vec::with_capacity(cfg.n_steps);

    for step in 0..cfg.n_steps {
        let batch: Vec<TrainExample> = (0..cfg.batch_size)
            .map(|b| draw(cfg, &task_set, &q, &cons, &steps, step, b))
            .collect();
        let (loss, grads) =
            pool.install(|| gradient_chunked(&params, &cfg.model, &batch, cfg.loss_positions, chunks))?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step, loss });
        }
        adam.lr = cfg.lr_at(step);
        adam_step(&mut params, &grads, &mut adam).map_err(|_| Error::Diverged { step, loss })?;
        curve.push((step, loss));
        progress(step, loss, &params);
    }
    Ok(TrainOutcome {
        params,
        curve,
        task_set,
    })
}
