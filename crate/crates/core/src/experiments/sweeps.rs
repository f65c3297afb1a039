use std::path::PathBuf;

use super::{evaluate_draws, EvalDraws, EvalProtocol, EvalResult, Equalizer, ExperimentConfig, NamedEqualizer};
use crate::channel::{db_to_linear, linear_to_db, TaskDistributionSpec};
use crate::numerics::CMatrix;
use crate::training::{
    load_checkpoint, pretrain_with_progress, save_checkpoint, PretrainTaskSet, RunOptions, TrainConfig,
};
use crate::transformer::ModelParams;
use crate::{Error, Result};

/// Threading and checkpoint reuse for sweeps.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub run: RunOptions,
    /// When set, each trained model is saved here as `<name>.ckpt`, and an
    /// existing file with an identical configuration is loaded instead of
    /// retraining.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains a model, or loads it from the checkpoint directory when a file
/// for the same configuration exists.
pub fn train_or_load(cfg: &TrainConfig, name: &str, opts: &SweepOptions) -> Result<(ModelParams, PretrainTaskSet)> {
    let path = opts.checkpoint_dir.as_ref().map(|d| d.join(format!("{name}.ckpt")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let (params, saved) = load_checkpoint(p)?;
        if saved == *cfg {
            log::info!("loaded {name} from {}", p.display());
            return Ok((params, PretrainTaskSet::for_config(cfg)));
        }
        log::info!("{} holds a different configuration; retraining", p.display());
    }
    let every = (cfg.n_steps / 20).max(1);
    let out = pretrain_with_progress(cfg, &opts.run, |step, loss, _| {
        if (step + 1) % every == 0 {
            log::info!("{name}: step {} loss {loss:.5}", step + 1);
        }
    })?;
    if let Some(p) = path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_checkpoint(&out.params, cfg, &p)?;
    }
    Ok((out.params, out.task_set))
}

fn protocol(cfg: &ExperimentConfig, spec: TaskDistributionSpec, bits: Option<u32>) -> EvalProtocol {
    EvalProtocol {
        n_test_tasks: cfg.n_test_tasks,
        n_context: cfg.train.n_context,
        n_test_symbols_per_task: cfg.n_test_symbols,
        bits,
        task_spec: spec,
        seed: cfg.train.seed,
    }
}

fn fixed_spec(cfg: &TrainConfig, sigma2: f64) -> TaskDistributionSpec {
    TaskDistributionSpec::fixed(cfg.model.n_t, cfg.model.n_r, sigma2)
}

fn with_tasks(cfg: &TrainConfig, m: usize) -> TrainConfig {
    TrainConfig { m_tasks: m, ..cfg.clone() }
}

/// True-prior reference: exact when unquantized, Monte Carlo otherwise.
fn true_prior_reference(cfg: &ExperimentConfig, bits: Option<u32>) -> NamedEqualizer<'static> {
    match bits {
        None => NamedEqualizer::new("bayes_true_exact", Equalizer::BayesTrueExact),
        Some(_) => NamedEqualizer::new(
            "bayes_true_mc",
            Equalizer::BayesTrueMc {
                samples: cfg.mc_samples,
                proposal: cfg.mc_proposal,
            },
        ),
    }
}

/// Trained model, discrete-prior baseline over that model's pre-training
/// channels, and the true-prior reference, for every `M` in the grid.
pub fn run_threshold_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<Vec<EvalResult>> {
    let train = &cfg.train;
    let draws = EvalDraws::generate(&protocol(cfg, train.task_spec, train.bits))?;
    let reference = true_prior_reference(cfg, train.bits);
    let mut rows = Vec::new();
    for &m in &cfg.m_grid {
        let tc = with_tasks(train, m);
        let (params, set) = train_or_load(&tc, &format!("threshold_m{m}"), opts)?;
        let channels: Vec<CMatrix> = set.tasks.iter().map(|t| t.h.clone()).collect();
        for d in &draws.draws {
            if channels.contains(&d.task.h) {
                return Err(Error::InvalidArgument("a test channel coincides with a pre-training channel".into()));
            }
        }
        let eqs = [
            NamedEqualizer::new(
                "icl",
                Equalizer::Model {
                    params: &params,
                    config: &tc.model,
                },
            ),
            NamedEqualizer::new("bayes_discrete", Equalizer::BayesDiscrete { channels: &channels }),
            reference.clone(),
        ];
        for e in evaluate_draws(&eqs, &draws, &opts.run)? {
            rows.push(e.summarize("threshold", m as f64, train.seed));
        }
    }
    Ok(rows)
}

/// The three SNR-sweep training distributions: fixed 0 dB, fixed 30 dB,
/// and uniform over 0..30 dB.
pub fn snr_sweep_models(cfg: &ExperimentConfig) -> Result<Vec<(&'static str, TrainConfig)>> {
    let base = with_tasks(&cfg.train, cfg.sweep_m_tasks);
    let mut out = Vec::new();
    for (id, lo, hi) in [("icl_snr0db", 0.0, 0.0), ("icl_snr30db", -30.0, -30.0), ("icl_range", -30.0, 0.0)] {
        let mut tc = base.clone();
        tc.task_spec = TaskDistributionSpec::new(tc.model.n_t, tc.model.n_r, lo, hi)?;
        out.push((id, tc));
    }
    Ok(out)
}

/// Three models trained at different SNR ranges, with the known-task
/// equalizers, across the test SNR grid.
pub fn run_snr_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<Vec<EvalResult>> {
    let mut models = Vec::new();
    for (id, tc) in snr_sweep_models(cfg)? {
        let (params, _) = train_or_load(&tc, &format!("snr_{id}"), opts)?;
        models.push((id, tc, params));
    }
    let mut rows = Vec::new();
    for &snr_db in &cfg.snr_grid_db {
        let spec = fixed_spec(&cfg.train, db_to_linear(-snr_db));
        let draws = EvalDraws::generate(&protocol(cfg, spec, cfg.train.bits))?;
        let mut eqs: Vec<NamedEqualizer<'_>> = models
            .iter()
            .map(|(id, tc, p)| {
                NamedEqualizer::new(
                    *id,
                    Equalizer::Model {
                        params: p,
                        config: &tc.model,
                    },
                )
            })
            .collect();
        eqs.push(NamedEqualizer::new("mmse", Equalizer::MmseKnownTask));
        eqs.push(NamedEqualizer::new("lmmse", Equalizer::LmmseKnownTask));
        for e in evaluate_draws(&eqs, &draws, &opts.run)? {
            rows.push(e.summarize("snr", snr_db, cfg.train.seed));
        }
    }
    Ok(rows)
}

/// Training configuration of the quantization sweep at `bits`.
pub fn bits_sweep_model(cfg: &ExperimentConfig, bits: Option<u32>) -> TrainConfig {
    let mut tc = with_tasks(&cfg.train, cfg.sweep_m_tasks);
    tc.bits = bits;
    let s = linear_to_db(db_to_linear(-cfg.bits_sweep_snr_db));
    tc.task_spec.sigma2_db_min = s;
    tc.task_spec.sigma2_db_max = s;
    tc
}

/// A model trained at each resolution, with the known-task equalizers at
/// the same resolution.
pub fn run_quantization_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<Vec<EvalResult>> {
    let sigma2 = db_to_linear(-cfg.bits_sweep_snr_db);
    let mut rows = Vec::new();
    for &bits in &cfg.bits_grid {
        let tc = bits_sweep_model(cfg, bits);
        let tag = bits.map_or_else(|| "inf".to_string(), |b| b.to_string());
        let (params, _) = train_or_load(&tc, &format!("bits_{tag}"), opts)?;
        let draws = EvalDraws::generate(&protocol(cfg, fixed_spec(&cfg.train, sigma2), bits))?;
        let eqs = [
            NamedEqualizer::new(
                "icl",
                Equalizer::Model {
                    params: &params,
                    config: &tc.model,
                },
            ),
            NamedEqualizer::new("mmse", Equalizer::MmseKnownTask),
            NamedEqualizer::new("lmmse", Equalizer::LmmseKnownTask),
        ];
        let value = bits.map_or(f64::INFINITY, f64::from);
        for e in evaluate_draws(&eqs, &draws, &opts.run)? {
            rows.push(e.summarize("bits", value, cfg.train.seed));
        }
    }
    Ok(rows)
}
