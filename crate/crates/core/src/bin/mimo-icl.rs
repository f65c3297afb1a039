use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mimo_icl::experiments::{
    emit_plot_data, evaluate, parse_csv, run_quantization_sweep, run_snr_sweep, run_threshold_sweep, write_csv,
    EvalProtocol, Equalizer, ExperimentConfig, NamedEqualizer, SweepOptions,
};
use mimo_icl::training::{load_checkpoint, pretrain_with_progress, save_checkpoint, RunOptions};
use mimo_icl::Result;

/// Transformer equalizer experiments: training, evaluation and sweeps.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file (checkpoint for `train`, CSV or plot data otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint to evaluate, or directory of sweep checkpoints.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Worker threads for gradients and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Single-threaded, bit-reproducible arithmetic.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a model and write a checkpoint.
    Train,
    /// Evaluate a checkpoint against the known-task and prior baselines.
    Eval,
    /// MSE against the number of pre-training tasks.
    SweepThreshold,
    /// MSE against test SNR for models trained at different SNRs.
    SweepSnr,
    /// MSE against receiver resolution.
    SweepBits,
    /// Convert a results CSV to plot blocks.
    PlotData {
        /// Results CSV written by a sweep or `eval`.
        input: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let run_opts = RunOptions {
        threads: cli.threads,
        deterministic: cli.deterministic,
    };
    let sweep_opts = SweepOptions {
        run: run_opts,
        checkpoint_dir: cli.checkpoint.clone(),
    };
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
            let every = (cfg.train.n_steps / 50).max(1);
            let result = pretrain_with_progress(&cfg.train, &run_opts, |step, loss, _| {
                if (step + 1) % every == 0 {
                    log::info!("step {} loss {loss:.6}", step + 1);
                }
            })?;
            save_checkpoint(&result.params, &cfg.train, &out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Eval => {
            let mut cfg = load_config(cli)?;
            let path = cli
                .checkpoint
                .as_ref()
                .ok_or_else(|| mimo_icl::Error::Config("eval needs --checkpoint".into()))?;
            let (params, trained) = load_checkpoint(path)?;
            if cli.config.is_none() {
                cfg.train = trained.clone();
                if let Some(s) = cli.seed {
                    cfg.train.seed = s;
                }
            }
            let protocol = EvalProtocol {
                n_test_tasks: cfg.n_test_tasks,
                n_context: cfg.train.n_context,
                n_test_symbols_per_task: cfg.n_test_symbols,
                bits: cfg.train.bits,
                task_spec: cfg.train.task_spec,
                seed: cfg.train.seed,
            };
            let reference = match protocol.bits {
                None => NamedEqualizer::new("bayes_true_exact", Equalizer::BayesTrueExact),
                Some(_) => NamedEqualizer::new(
                    "bayes_true_mc",
                    Equalizer::BayesTrueMc {
                        samples: cfg.mc_samples,
                        proposal: cfg.mc_proposal,
                    },
                ),
            };
            let eqs = [
                NamedEqualizer::new(
                    "icl",
                    Equalizer::Model {
                        params: &params,
                        config: &trained.model,
                    },
                ),
                NamedEqualizer::new("mmse", Equalizer::MmseKnownTask),
                NamedEqualizer::new("lmmse", Equalizer::LmmseKnownTask),
                reference,
            ];
            let run = evaluate(&eqs, &protocol, &run_opts)?;
            emit(cli.out.as_deref(), &write_csv(&run.results)?)?;
        }
        Command::SweepThreshold => {
            let rows = run_threshold_sweep(&load_config(cli)?, &sweep_opts)?;
            emit(cli.out.as_deref(), &write_csv(&rows)?)?;
        }
        Command::SweepSnr => {
            let rows = run_snr_sweep(&load_config(cli)?, &sweep_opts)?;
            emit(cli.out.as_deref(), &write_csv(&rows)?)?;
        }
        Command::SweepBits => {
            let rows = run_quantization_sweep(&load_config(cli)?, &sweep_opts)?;
            emit(cli.out.as_deref(), &write_csv(&rows)?)?;
        }
        Command::PlotData { input } => {
            let rows = parse_csv(&fs::read_to_string(input)?)?;
            emit(cli.out.as_deref(), &emit_plot_data(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
