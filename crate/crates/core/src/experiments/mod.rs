//! Evaluation protocol, the three sweeps, CSV persistence and plot data.

mod config;
mod csv_io;
mod sweeps;

pub use config::ExperimentConfig;
pub use csv_io::{emit_plot_data, parse_csv, parse_plot_data, write_csv, PlotBlock, CSV_HEADER};
pub use sweeps::{
    bits_sweep_model, run_quantization_sweep, run_snr_sweep, run_threshold_sweep, snr_sweep_models,
    train_or_load, SweepOptions,
};

use std::hash::Hasher;

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::channel::{
    apply_channel, sample_context, sample_task, Constellation, ContextSet, Quantizer, Task,
    TaskDistributionSpec,
};
use crate::estimators::{
    bayes_mmse_gaussian_exact, continuous_prior_mixture, lmmse_known_task, mmse_known_task, ChannelMixture,
    Proposal,
};
use crate::numerics::{CMatrix, Complex, RngStream};
use crate::training::RunOptions;
use crate::transformer::{predict_batch, ModelConfig, ModelParams};
use crate::{Error, Result};

const EVAL_STREAM: u64 = 0xE7A1;
const MC_STREAM: u64 = 0xE7A2;

/// Rows whose median effective sample size falls below this are flagged.
pub const ESS_FLAG_THRESHOLD: f64 = 50.0;

/// How test data are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub n_test_tasks: usize,
    pub n_context: usize,
    pub n_test_symbols_per_task: usize,
    pub bits: Option<u32>,
    pub task_spec: TaskDistributionSpec,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_test_tasks == 0 || self.n_test_symbols_per_task == 0 {
            return Err(Error::InvalidArgument("evaluation counts must be at least 1".into()));
        }
        self.task_spec.validate()
    }

    pub fn quantizer(&self) -> Quantizer {
        Quantizer::from_bits(self.bits)
    }
}

/// An equalizer under evaluation. Baselines are given the test task's noise
/// variance; the known-task ones also get its channel.
#[derive(Debug, Clone, Copy)]
pub enum Equalizer<'a> {
    Model { params: &'a ModelParams, config: &'a ModelConfig },
    MmseKnownTask,
    LmmseKnownTask,
    /// Posterior mean under a uniform prior over the given channels.
    BayesDiscrete { channels: &'a [CMatrix] },
    BayesTrueMc { samples: usize, proposal: Proposal },
    BayesTrueExact,
}

impl Equalizer<'_> {
    fn check(&self, protocol: &EvalProtocol) -> Result<()> {
        let incompatible = |name: &str, reason: String| {
            Err(Error::Incompatible {
                equalizer: name.to_string(),
                reason,
            })
        };
        match self {
            Equalizer::BayesTrueExact if protocol.bits.is_some() => {
                incompatible("bayes_mmse_gaussian_exact", "requires an unquantized receiver".into())
            }
            Equalizer::Model { config, .. } if protocol.n_context > config.n_max => incompatible(
                "model",
                format!("context length {} exceeds n_max = {}", protocol.n_context, config.n_max),
            ),
            Equalizer::Model { config, .. }
                if config.n_t != protocol.task_spec.n_t || config.n_r != protocol.task_spec.n_r =>
            {
                incompatible("model", "antenna counts differ from the test tasks".into())
            }
            Equalizer::BayesDiscrete { channels: [] } => {
                incompatible("bayes_mmse_discrete", "empty channel prior".into())
            }
            Equalizer::BayesTrueMc { samples: 0, .. } => {
                incompatible("bayes_mmse_continuous_mc", "needs at least one sample".into())
            }
            _ => Ok(()),
        }
    }
}

/// An equalizer with the id written to the CSV.
#[derive(Debug, Clone)]
pub struct NamedEqualizer<'a> {
    pub id: String,
    pub equalizer: Equalizer<'a>,
}

impl<'a> NamedEqualizer<'a> {
    pub fn new(id: impl Into<String>, equalizer: Equalizer<'a>) -> Self {
        Self {
            id: id.into(),
            equalizer,
        }
    }
}

/// A test input and its observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPair {
    pub x: Vec<Complex>,
    pub y: Vec<Complex>,
}

/// One test task with its context and test pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDraw {
    pub task: Task,
    pub context: ContextSet,
    pub tests: Vec<TestPair>,
}

/// All evaluation data of a protocol, shared by every equalizer compared.
#[derive(Debug, Clone)]
pub struct EvalDraws {
    pub protocol: EvalProtocol,
    pub draws: Vec<TaskDraw>,
    /// FNV-1a digest of every sampled value.
    pub hash: u64,
}

fn hash_complex(h: &mut FnvHasher, v: &[Complex]) {
    for z in v {
        h.write_u64(z.re.to_bits());
        h.write_u64(z.im.to_bits());
    }
}

impl EvalDraws {
    /// Task `t` is drawn from its own stream, so the data do not depend on
    /// evaluation order or threading.
    pub fn generate(protocol: &EvalProtocol) -> Result<Self> {
        Self::build(protocol, |_, rng| sample_task(&protocol.task_spec, rng))
    }

    /// As [`EvalDraws::generate`], but draw `t` uses `tasks[t % len]`
    /// instead of a freshly sampled task. Contexts and test pairs are still
    /// fresh for every draw.
    pub fn for_fixed_tasks(protocol: &EvalProtocol, tasks: &[Task]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("no tasks given".into()));
        }
        if tasks.iter().any(|t| t.n_t() != protocol.task_spec.n_t || t.n_r() != protocol.task_spec.n_r) {
            return Err(Error::DimensionMismatch("task dimensions differ from the protocol".into()));
        }
        Self::build(protocol, |t, _| tasks[t % tasks.len()].clone())
    }

    fn build(protocol: &EvalProtocol, mut task_for: impl FnMut(usize, &mut RngStream) -> Task) -> Result<Self> {
        protocol.validate()?;
        let q = protocol.quantizer();
        let cons = Constellation::qam4(protocol.task_spec.n_t);
        let root = RngStream::new(protocol.seed, EVAL_STREAM);
        let draws: Vec<TaskDraw> = (0..protocol.n_test_tasks)
            .map(|t| {
                let mut rng = root.derive(t as u64);
                let task = task_for(t, &mut rng);
                let context = sample_context(&task, &q, &cons, protocol.n_context, &mut rng);
                let tests = (0..protocol.n_test_symbols_per_task)
                    .map(|_| {
                        let x = cons.input(rng.index(cons.len())).to_vec();
                        let y = apply_channel(&task, &q, &x, &mut rng);
                        TestPair { x, y }
                    })
                    .collect();
                TaskDraw { task, context, tests }
            })
            .collect();
        let mut h = FnvHasher::default();
        for d in &draws {
            hash_complex(&mut h, d.task.h.as_slice());
            h.write_u64(d.task.sigma2.to_bits());
            for p in &d.context.pairs {
                hash_complex(&mut h, &p.x);
                hash_complex(&mut h, &p.y);
            }
            for p in &d.tests {
                hash_complex(&mut h, &p.x);
                hash_complex(&mut h, &p.y);
            }
        }
        Ok(Self {
            protocol: protocol.clone(),
            draws,
            hash: h.finish(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.draws.iter().map(|d| d.tests.len()).sum()
    }
}

/// Per-draw squared errors of one equalizer, in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorErrors {
    pub id: String,
    pub errors: Vec<f64>,
    /// Effective sample sizes of Monte Carlo baselines, one per draw.
    pub ess: Vec<f64>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub sweep: String,
    pub estimator: String,
    /// Sweep coordinate; `inf` marks an unquantized receiver.
    pub value: f64,
    pub mse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
    /// Median effective sample size, Monte Carlo baselines only.
    pub ess: Option<f64>,
    pub seed: u64,
}

impl EvalResult {
    pub fn ess_flagged(&self) -> bool {
        self.ess.is_some_and(|e| e < ESS_FLAG_THRESHOLD)
    }
}

/// Mean with a 95% normal-approximation interval.
pub fn mean_ci(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, mean, mean);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

/// Mean and 95% interval of the paired differences `a − b`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch("paired samples must have equal, non-zero length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(mean_ci(&d))
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl EstimatorErrors {
    pub fn summarize(&self, sweep: &str, value: f64, seed: u64) -> EvalResult {
        let (mse, ci_low, ci_high) = mean_ci(&self.errors);
        EvalResult {
            sweep: sweep.to_string(),
            estimator: self.id.clone(),
            value,
            mse,
            ci_low,
            ci_high,
            n_samples: self.errors.len(),
            ess: median(&mut self.ess.clone()),
            seed,
        }
    }
}

fn sq_err(a: &[Complex], b: &[Complex]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).norm_sqr()).sum()
}

/// Errors (and effective sample sizes) of one equalizer on task `t`.
fn task_errors(
    eq: &Equalizer<'_>,
    draw: &TaskDraw,
    t: usize,
    protocol: &EvalProtocol,
    cons: &Constellation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = protocol.quantizer();
    let task = &draw.task;
    let mut errs = Vec::with_capacity(draw.tests.len());
    let mut ess = Vec::new();
    match eq {
        Equalizer::Model { params, config } => {
            let items: Vec<(&ContextSet, &[Complex])> =
                draw.tests.iter().map(|p| (&draw.context, p.y.as_slice())).collect();
            let est = predict_batch(params, config, cons, &items)?;
            errs.extend(est.iter().zip(&draw.tests).map(|(e, p)| sq_err(e, &p.x)));
        }
        Equalizer::MmseKnownTask => {
            for p in &draw.tests {
                errs.push(sq_err(&mmse_known_task(task, &q, cons, &p.y)?, &p.x));
            }
        }
        Equalizer::LmmseKnownTask => {
            for p in &draw.tests {
                errs.push(sq_err(&lmmse_known_task(task, &p.y, task.n_t())?, &p.x));
            }
        }
        Equalizer::BayesDiscrete { channels } => {
            let mix = ChannelMixture::discrete(channels, task.sigma2, &q, cons, &draw.context)?;
            for p in &draw.tests {
                errs.push(sq_err(&mix.estimate(cons, &p.y)?.x_hat, &p.x));
            }
        }
        Equalizer::BayesTrueMc { samples, proposal } => {
            let mut rng = RngStream::new(protocol.seed, MC_STREAM).derive(t as u64);
            let mix = continuous_prior_mixture(
                task.n_r(),
                task.sigma2,
                &q,
                cons,
                &draw.context,
                *samples,
                *proposal,
                &mut rng,
            )?;
            for p in &draw.tests {
                let est = mix.estimate(cons, &p.y)?;
                errs.push(sq_err(&est.x_hat, &p.x));
                ess.push(est.ess);
            }
        }
        Equalizer::BayesTrueExact => {
            for p in &draw.tests {
                let est = bayes_mmse_gaussian_exact(task.sigma2, &q, cons, &draw.context, &p.y)?;
                errs.push(sq_err(&est, &p.x));
            }
        }
    }
    Ok((errs, ess))
}

/// Runs every equalizer on the same draws. Tasks are evaluated in parallel
/// on a pool sized by `opts`; results are assembled in task order.
pub fn evaluate_draws(
    equalizers: &[NamedEqualizer<'_>],
    draws: &EvalDraws,
    opts: &RunOptions,
) -> Result<Vec<EstimatorErrors>> {
    for e in equalizers {
        e.equalizer.check(&draws.protocol)?;
    }
    let cons = Constellation::qam4(draws.protocol.task_spec.n_t);
    let pool = opts.pool()?;
    type PerTask = Vec<(Vec<f64>, Vec<f64>)>;
    let per_task: Vec<Result<PerTask>> = pool.install(|| {
        draws
            .draws
            .par_iter()
            .enumerate()
            .map(|(t, d)| {
                equalizers
                    .iter()
                    .map(|e| task_errors(&e.equalizer, d, t, &draws.protocol, &cons))
                    .collect()
            })
            .collect()
    });
    let mut out: Vec<EstimatorErrors> = equalizers
        .iter()
        .map(|e| EstimatorErrors {
            id: e.id.clone(),
            errors: Vec::with_capacity(draws.n_samples()),
            ess: Vec::new(),
        })
        .collect();
    for task in per_task {
        for (acc, (errs, ess)) in out.iter_mut().zip(task?) {
            acc.errors.extend(errs);
            acc.ess.extend(ess);
        }
    }
    log::info!(
        "evaluated {} equalizers on {} draws (draw hash {:016x})",
        equalizers.len(),
        draws.n_samples(),
        draws.hash
    );
    Ok(out)
}

/// Outcome of [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub results: Vec<EvalResult>,
    pub errors: Vec<EstimatorErrors>,
    pub draw_hash: u64,
}

/// Draws the protocol's test data once and evaluates every equalizer on
/// it. Rows use sweep name `eval` with the context length as value.
pub fn evaluate(equalizers: &[NamedEqualizer<'_>], protocol: &EvalProtocol, opts: &RunOptions) -> Result<EvalRun> {
    let draws = EvalDraws::generate(protocol)?;
    let errors = evaluate_draws(equalizers, &draws, opts)?;
    let results = errors
        .iter()
        .map(|e| e.summarize("eval", protocol.n_context as f64, protocol.seed))
        .collect();
    Ok(EvalRun {
        results,
        errors,
        draw_hash: draws.hash,
    })
}

#[cfg(test)]
mod tests;
