use super::*;
use crate::channel::db_to_linear;
use crate::training::TrainConfig;

fn protocol(bits: Option<u32>, sigma2: f64, tasks: usize, symbols: usize, n: usize) -> EvalProtocol {
    EvalProtocol {
        n_test_tasks: tasks,
        n_context: n,
        n_test_symbols_per_task: symbols,
        bits,
        task_spec: TaskDistributionSpec::fixed(2, 2, sigma2),
        seed: 17,
    }
}

fn errors_of(eqs: &[NamedEqualizer<'_>], p: &EvalProtocol) -> Vec<EstimatorErrors> {
    evaluate(eqs, p, &RunOptions::default()).unwrap().errors
}

#[test]
fn ci_from_per_draw_variance() {
    let v = [1.0, 2.0, 3.0, 4.0];
    let (m, lo, hi) = mean_ci(&v);
    let sd = (5.0f64 / 3.0).sqrt();
    assert_eq!(m, 2.5);
    assert!((hi - m - 1.96 * sd / 2.0).abs() < 1e-15);
    assert!((m - lo - 1.96 * sd / 2.0).abs() < 1e-15);
    assert_eq!(mean_ci(&[0.3]), (0.3, 0.3, 0.3));
}

#[test]
fn ci_width_shrinks_with_sample_count() {
    let mut rng = RngStream::new(3, 3);
    let v: Vec<f64> = (0..40_000).map(|_| rng.standard_normal().powi(2)).collect();
    let w = |s: &[f64]| {
        let (_, lo, hi) = mean_ci(s);
        hi - lo
    };
    let ratio = w(&v[..20_000]) / w(&v);
    assert!((ratio - 2f64.sqrt()).abs() < 0.05, "{ratio}");
}

#[test]
fn uninformative_noise_gives_unit_error() {
    let p = protocol(None, 1e8, 50, 40, 0);
    let e = errors_of(&[NamedEqualizer::new("mmse", Equalizer::MmseKnownTask)], &p);
    let r = e[0].summarize("eval", 0.0, 17);
    assert!((r.mse - 1.0).abs() < 1e-3, "{}", r.mse);
    assert!(r.ci_low <= r.mse && r.mse <= r.ci_high);
}

#[test]
fn single_channel_discrete_prior_matches_known_task() {
    let p = protocol(Some(3), 0.1, 20, 16, 5);
    let draws = EvalDraws::generate(&p).unwrap();
    let cons = Constellation::qam4(2);
    for (t, d) in draws.draws.iter().enumerate() {
        let own = [d.task.h.clone()];
        let (a, _) = task_errors(&Equalizer::BayesDiscrete { channels: &own }, d, t, &p, &cons).unwrap();
        let (b, _) = task_errors(&Equalizer::MmseKnownTask, d, t, &p, &cons).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn known_task_mmse_beats_lmmse_at_four_bits() {
    let p = protocol(Some(4), db_to_linear(-10.0), 100, 25, 0);
    let e = errors_of(
        &[
            NamedEqualizer::new("mmse", Equalizer::MmseKnownTask),
            NamedEqualizer::new("lmmse", Equalizer::LmmseKnownTask),
        ],
        &p,
    );
    assert!(e[0].errors.len() >= 2000);
    let (_, _, hi) = paired_difference(&e[0].errors, &e[1].errors).unwrap();
    assert!(hi < 0.0);
}

#[test]
fn exact_oracle_rejects_quantized_protocol() {
    let p = protocol(Some(4), 0.1, 2, 2, 3);
    let r = evaluate(&[NamedEqualizer::new("x", Equalizer::BayesTrueExact)], &p, &RunOptions::default());
    assert!(matches!(r, Err(Error::Incompatible { .. })));
    let cfg = ModelConfig::new(2, 2, 1, 2, 8, 16, 2).unwrap();
    let params = ModelParams::zeros(&cfg);
    let m = Equalizer::Model {
        params: &params,
        config: &cfg,
    };
    let r = evaluate(&[NamedEqualizer::new("icl", m)], &p, &RunOptions::default());
    assert!(matches!(r, Err(Error::Incompatible { .. })));
}

#[test]
fn draws_are_reproducible_and_seed_dependent() {
    let p = protocol(Some(2), 0.2, 6, 5, 4);
    let a = EvalDraws::generate(&p).unwrap();
    let b = EvalDraws::generate(&p).unwrap();
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.draws, b.draws);
    let c = EvalDraws::generate(&EvalProtocol { seed: 18, ..p.clone() }).unwrap();
    assert_ne!(a.hash, c.hash);
    // Growing the task count extends rather than reshuffles the draws.
    let d = EvalDraws::generate(&EvalProtocol { n_test_tasks: 9, ..p }).unwrap();
    assert_eq!(&d.draws[..6], &a.draws[..]);
}

#[test]
fn threaded_evaluation_is_identical() {
    let p = protocol(Some(3), 0.1, 12, 8, 6);
    let eqs = [
        NamedEqualizer::new("mmse", Equalizer::MmseKnownTask),
        NamedEqualizer::new(
            "mc",
            Equalizer::BayesTrueMc {
                samples: 64,
                proposal: Proposal::ContextGaussian,
            },
        ),
    ];
    let a = evaluate(&eqs, &p, &RunOptions::default()).unwrap();
    let b = evaluate(&eqs, &p, &RunOptions { threads: 4, deterministic: false }).unwrap();
    assert_eq!(a.errors, b.errors);
    assert_eq!(a.results, b.results);
    assert!(a.results[1].ess.is_some());
    assert!(a.results[0].ess.is_none());
}

fn sample_rows() -> Vec<EvalResult> {
    vec![
        EvalResult {
            sweep: "bits".into(),
            estimator: "icl".into(),
            value: f64::INFINITY,
            mse: 0.1 + 0.2,
            ci_low: 0.28,
            ci_high: 1.0 / 3.0,
            n_samples: 32000,
            ess: None,
            seed: 7,
        },
        EvalResult {
            sweep: "threshold".into(),
            estimator: "bayes_true_mc".into(),
            value: 1024.0,
            mse: 2.0f64.sqrt() * 1e-7,
            ci_low: 1e-7,
            ci_high: 2e-7,
            n_samples: 10,
            ess: Some(33.25),
            seed: u64::MAX,
        },
    ]
}

#[test]
fn csv_round_trip_is_exact() {
    let rows = sample_rows();
    let text = write_csv(&rows).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert!(text.contains(",inf,"));
    assert_eq!(parse_csv(&text).unwrap(), rows);
    assert!(rows[1].ess_flagged() && !rows[0].ess_flagged());
}

#[test]
fn csv_rejects_malformed_input() {
    assert!(parse_csv("a,b,c\n1,2,3\n").is_err());
    let bad = format!("{CSV_HEADER}\nbits,icl,1,x,0,1,3,,0\n");
    assert!(parse_csv(&bad).is_err());
    let short = format!("{CSV_HEADER}\nbits,icl,1\n");
    assert!(parse_csv(&short).is_err());
}

#[test]
fn plot_blocks_round_trip() {
    let mut rows = sample_rows();
    rows.push(EvalResult {
        value: 2.0,
        ..rows[0].clone()
    });
    let text = emit_plot_data(&rows);
    let blocks = parse_plot_data(&text).unwrap();
    assert_eq!(blocks.len(), 2);
    assert_eq!(blocks[0].estimator, "icl");
    assert_eq!(blocks[0].points.len(), 2);
    assert_eq!(blocks[0].points[0], [f64::INFINITY, 0.1 + 0.2, 0.28, 1.0 / 3.0]);
    assert_eq!(blocks[1].points[0][1], 2.0f64.sqrt() * 1e-7);
    assert_eq!(emit_plot_data(&[]), "");
    assert!(parse_plot_data("1 2 3 4\n").is_err());
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "n_t = 2\nn_r = 2\nn_layers = 1\nn_heads = 2\nd_e = 8\nd_f = 16\nn_max = 4\nn_context = 4\n\
         batch_size = 4\nn_steps = 3\nn_test_tasks = 3\nn_test_symbols = 4\nm_grid = 1,2\n\
         snr_grid_db = 0,30\nbits_grid = 1,inf\nsweep_m_tasks = 2\nmc_samples = 32\n",
    )
    .unwrap();
    cfg.train.seed = 5;
    cfg
}

#[test]
fn sweep_row_counts() {
    let cfg = tiny_experiment();
    let opts = SweepOptions::default();
    let t = run_threshold_sweep(&cfg, &opts).unwrap();
    assert_eq!(t.len(), 2 * 3);
    assert_eq!(t[2].estimator, "bayes_true_mc");
    let s = run_snr_sweep(&cfg, &opts).unwrap();
    assert_eq!(s.len(), 2 * 5);
    let b = run_quantization_sweep(&cfg, &opts).unwrap();
    assert_eq!(b.len(), 2 * 3);
    assert_eq!(b[3].value, f64::INFINITY);
    for r in t.iter().chain(&s).chain(&b) {
        assert!(r.mse >= 0.0 && r.ci_low <= r.mse && r.mse <= r.ci_high);
    }
}

#[test]
fn checkpoint_directory_reuses_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment();
    let opts = SweepOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..SweepOptions::default()
    };
    let a = run_quantization_sweep(&cfg, &opts).unwrap();
    assert!(dir.path().join("bits_inf.ckpt").exists());
    let b = run_quantization_sweep(&cfg, &opts).unwrap();
    assert_eq!(a, b);
    let tc: TrainConfig = bits_sweep_model(&cfg, Some(1));
    let (p, _) = train_or_load(&tc, "bits_1", &opts).unwrap();
    assert_eq!(p, crate::training::load_checkpoint(dir.path().join("bits_1.ckpt")).unwrap().0);
}

#[test]
fn snr_models_cover_the_range() {
    let models = snr_sweep_models(&ExperimentConfig::default()).unwrap();
    let ids: Vec<_> = models.iter().map(|m| m.0).collect();
    assert_eq!(ids, ["icl_snr0db", "icl_snr30db", "icl_range"]);
    assert_eq!(models[0].1.fixed_sigma2(), Some(1.0));
    assert!((models[1].1.fixed_sigma2().unwrap() - 1e-3).abs() < 1e-18);
    assert_eq!(models[2].1.task_spec.sigma2_db_min, -30.0);
    assert_eq!(models[2].1.m_tasks, 4096);
}

#[test]
fn fixed_task_draws_reuse_the_given_channels() {
    let p = protocol(None, 0.1, 4, 3, 2);
    let mut rng = RngStream::new(1, 1);
    let tasks: Vec<Task> = (0..2)
        .map(|_| sample_task(&TaskDistributionSpec::fixed(2, 2, 0.3), &mut rng))
        .collect();
    let d = EvalDraws::for_fixed_tasks(&p, &tasks).unwrap();
    assert_eq!(d.draws[2].task, tasks[0]);
    assert_eq!(d.draws[3].task, tasks[1]);
    assert_ne!(d.draws[0].context, d.draws[2].context);
    assert!(EvalDraws::for_fixed_tasks(&p, &[]).is_err());
}

proptest::proptest! {
    #[test]
    fn csv_round_trip_for_arbitrary_rows(
        rows in proptest::collection::vec(
            (
                "[a-z_]{1,8}",
                "[a-z0-9_]{1,12}",
                proptest::num::f64::NORMAL | proptest::num::f64::ZERO,
                proptest::num::f64::ANY,
                0usize..100_000,
                proptest::option::of(0.0f64..1e6),
                proptest::num::u64::ANY,
            ),
            0..8,
        )
    ) {
        let rows: Vec<EvalResult> = rows
            .into_iter()
            .map(|(sweep, estimator, value, mse, n_samples, ess, seed)| EvalResult {
                sweep,
                estimator,
                value,
                mse: if mse.is_nan() { 0.5 } else { mse },
                ci_low: mse.min(0.0),
                ci_high: 1.0 / 3.0,
                n_samples,
                ess,
                seed,
            })
            .collect();
        proptest::prop_assert_eq!(parse_csv(&write_csv(&rows).unwrap()).unwrap(), rows);
    }
}
