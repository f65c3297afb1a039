use super::*;
use crate::channel::{apply_channel, sample_context, sample_task, Quantizer, Task, TaskDistributionSpec};
use crate::estimators::{input_posterior, mmse_known_task};
use crate::numerics::CMatrix;

fn c(re: f64, im: f64) -> Complex {
    Complex::new(re, im)
}

fn small_cfg() -> ModelConfig {
    ModelConfig::new(2, 2, 2, 2, 8, 16, 8).unwrap()
}

fn random_instance(n: usize, seed: u64) -> (ContextSet, Vec<Complex>) {
    let mut rng = RngStream::new(seed, 0);
    let spec = TaskDistributionSpec::fixed(2, 2, 0.1);
    let task = sample_task(&spec, &mut rng);
    let cons = Constellation::qam4(2);
    let q = Quantizer::unquantized();
    let ctx = sample_context(&task, &q, &cons, n, &mut rng);
    let y = apply_channel(&task, &q, cons.input(3), &mut rng);
    (ctx, y)
}

/// Scaled-up random weights so attention patterns are far from uniform.
fn lively_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = RngStream::new(seed, 7);
    let mut p = ModelParams::init(cfg, &mut rng);
    for (_, t) in p.tensors_mut() {
        for v in t.as_mut_slice() {
            *v = rng.normal(0.0, 0.5);
        }
    }
    p
}

/// Column-per-token reference layer written from the per-head equations.
fn reference_layer(lp: &LayerParams, cfg: &ModelConfig, e: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = e.len();
    let d = cfg.head_dim();
    let de = cfg.d_e;
    let proj = |w: &RMatrix, row0: usize, tok: &[f64]| -> Vec<f64> {
        (0..d).map(|i| (0..de).map(|j| w[(row0 + i, j)] * tok[j]).sum()).collect()
    };
    let mut bcat = vec![vec![0.0; de]; t];
    for h in 0..cfg.n_heads {
        let keys: Vec<Vec<f64>> = e.iter().map(|tok| proj(&lp.w_k, h * d, tok)).collect();
        let qs: Vec<Vec<f64>> = e.iter().map(|tok| proj(&lp.w_q, h * d, tok)).collect();
        let vs: Vec<Vec<f64>> = e.iter().map(|tok| proj(&lp.w_v, h * d, tok)).collect();
        for i in 0..t {
            let visible = if cfg.use_causal_mask { i + 1 } else { t };
            let scores: Vec<f64> = (0..visible)
                .map(|j| keys[j].iter().zip(&qs[i]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..visible {
                for k in 0..d {
                    bcat[i][h * d + k] += w[j] / z * vs[j][k];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let a: Vec<f64> = (0..de)
            .map(|c| (0..de).map(|r| lp.w_o[(r, c)] * bcat[i][r]).sum::<f64>() + e[i][c])
            .collect();
        let mean = a.iter().sum::<f64>() / de as f64;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / de as f64;
        let ln: Vec<f64> = (0..de)
            .map(|c| (a[c] - mean) / (var + 1e-5).sqrt() * lp.ln_gain[(0, c)] + lp.ln_bias[(0, c)])
            .collect();
        let hidden: Vec<f64> = (0..cfg.d_f)
            .map(|f| {
                let z: f64 = (0..de).map(|c| lp.w_2[(f, c)] * ln[c]).sum();
                0.5 * z * libm::erfc(-z / std::f64::consts::SQRT_2)
            })
            .collect();
        out.push(
            (0..de)
                .map(|c| (0..cfg.d_f).map(|f| lp.w_1[(c, f)] * hidden[f]).sum::<f64>() + a[c])
                .collect(),
        );
    }
    out
}

#[test]
fn realify_examples() {
    assert_eq!(realify(&[c(1.0, 2.0)], 4).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
    assert_eq!(realify(&[c(0.0, 0.0); 2], 4).unwrap(), vec![0.0; 4]);
    assert_eq!(realify(&[c(1.0, 2.0), c(3.0, 4.0)], 4).unwrap(), vec![1.0, 3.0, 2.0, 4.0]);
    assert!(realify(&[c(1.0, 0.0); 3], 4).is_err());
}

#[test]
fn config_validation() {
    assert!(ModelConfig::new(2, 2, 2, 3, 8, 16, 4).is_err());
    let cfg = ModelConfig::full_scale();
    assert_eq!((cfg.d_s, cfg.n_classes, cfg.head_dim()), (4, 16, 16));
    let mut bad = cfg.clone();
    bad.n_classes = 8;
    assert!(bad.validate().is_err());
}

#[test]
fn embed_token_counts() {
    let cfg = ModelConfig::new(2, 2, 1, 2, 8, 16, 20).unwrap();
    let p = ModelParams::init(&cfg, &mut RngStream::new(1, 0));
    let (ctx, y) = random_instance(20, 3);
    let e = embed(&p, &cfg, &ctx, &y).unwrap();
    assert_eq!((e.len(), e.n), (41, 20));

    let e0 = embed(&p, &cfg, &ContextSet::empty(), &y).unwrap();
    assert_eq!(e0.len(), 1);
    let s = realify(&y, 4).unwrap();
    for r in 0..8 {
        let expect: f64 = (0..4).map(|j| p.embed[(r, j)] * s[j]).sum::<f64>() + p.positional[(r, 0)];
        assert!((e0.tokens[(0, r)] - expect).abs() < 1e-15);
    }

    let (long, _) = random_instance(21, 3);
    assert!(embed(&p, &cfg, &long, &y).is_err());
}

#[test]
fn zero_embedding_without_positional_gives_zero_tokens() {
    let mut cfg = small_cfg();
    cfg.use_positional = false;
    let mut p = lively_params(&cfg, 2);
    p.embed.fill(0.0);
    let (ctx, y) = random_instance(5, 4);
    let e = embed(&p, &cfg, &ctx, &y).unwrap();
    assert!(e.tokens.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_matches_column_reference() {
    for causal in [true, false] {
        let mut cfg = small_cfg();
        cfg.use_causal_mask = causal;
        let p = lively_params(&cfg, 11);
        let (ctx, y) = random_instance(4, 5);
        let e = embed(&p, &cfg, &ctx, &y).unwrap();
        let got = attention_layer(&e, &p.layers[0], &cfg).unwrap();
        let cols: Vec<Vec<f64>> = (0..e.len()).map(|r| e.tokens.row(r).to_vec()).collect();
        let want = reference_layer(&p.layers[0], &cfg, &cols);
        for (r, w) in want.iter().enumerate() {
            for (a, b) in got.tokens.row(r).iter().zip(w) {
                assert!((a - b).abs() < 1e-11, "causal={causal} row {r}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn attention_weights_normalized() {
    let cfg = small_cfg();
    let p = lively_params(&cfg, 3);
    let (ctx, y) = random_instance(6, 8);
    let e = embed(&p, &cfg, &ctx, &y).unwrap();
    let lp = &p.layers[0];
    let q = RMatrix::matmul(&e.tokens, false, &lp.w_q, true).unwrap();
    let k = RMatrix::matmul(&e.tokens, false, &lp.w_k, true).unwrap();
    let v = RMatrix::matmul(&e.tokens, false, &lp.w_v, true).unwrap();
    let t = e.len();
    let (_, probs) = kernels::attention(&q, &k, &v, cfg.attn_shape(t, 1));
    for row in probs.chunks(t) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_token_routes_value_through_output_projection() {
    let cfg = small_cfg();
    let p = lively_params(&cfg, 4);
    let lp = &p.layers[0];
    let e = RMatrix::from_fn(1, cfg.d_e, |_, c| (c as f64 * 0.37).sin());
    let q = RMatrix::matmul(&e, false, &lp.w_q, true).unwrap();
    let k = RMatrix::matmul(&e, false, &lp.w_k, true).unwrap();
    let v = RMatrix::matmul(&e, false, &lp.w_v, true).unwrap();
    let (b, _) = kernels::attention(&q, &k, &v, cfg.attn_shape(1, 1));
    assert_eq!(b, v);
    let a = RMatrix::matmul(&b, false, &lp.w_o, false).unwrap();
    let want = RMatrix::matmul(&RMatrix::matmul(&e, false, &lp.w_v, true).unwrap(), false, &lp.w_o, false).unwrap();
    assert_eq!(a, want);
}

#[test]
fn masked_layer_ignores_future_tokens() {
    let cfg = small_cfg();
    let p = lively_params(&cfg, 5);
    let (ctx, y) = random_instance(5, 9);
    let e = embed(&p, &cfg, &ctx, &y).unwrap();
    let base = attention_layer(&e, &p.layers[0], &cfg).unwrap();
    for t in 0..e.len() - 1 {
        let mut pert = e.clone();
        for r in t + 1..e.len() {
            for v in pert.tokens.row_mut(r) {
                *v += 3.0;
            }
        }
        let out = attention_layer(&pert, &p.layers[0], &cfg).unwrap();
        for r in 0..=t {
            for (a, b) in out.tokens.row(r).iter().zip(base.tokens.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_shapes_and_ranges() {
    let cfg = small_cfg();
    let cons = Constellation::qam4(2);
    let p = lively_params(&cfg, 6);
    for n in 0..=cfg.n_max {
        let (ctx, y) = random_instance(n, 100 + n as u64);
        let out = forward(&p, &cfg, &cons, &ctx, &y).unwrap();
        assert_eq!(out.class_probs.len(), n + 1);
        assert_eq!(out.soft_estimates.len(), n + 1);
        for (probs, est) in out.class_probs.iter().zip(&out.soft_estimates) {
            assert_eq!(probs.len(), 16);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for z in est {
                assert!(z.re.abs() <= cons.max_coordinate() + 1e-15);
                assert!(z.im.abs() <= cons.max_coordinate() + 1e-15);
            }
        }
    }
}

#[test]
fn forward_is_causal_at_every_query_position() {
    let cfg = small_cfg();
    let cons = Constellation::qam4(2);
    let p = lively_params(&cfg, 12);
    let (ctx, y) = random_instance(6, 13);
    let base = forward(&p, &cfg, &cons, &ctx, &y).unwrap();
    for i in 0..6 {
        // tokens after y-position 2i are x_{i+1}, y_{i+2}, ... and the query
        let mut pert = ctx.clone();
        pert.pairs[i].x = cons.input((pert.pairs[i].x_index + 5) % 16).to_vec();
        for pair in pert.pairs.iter_mut().skip(i + 1) {
            pair.y.iter_mut().for_each(|v| *v += c(0.7, -0.3));
            pair.x = cons.input((pair.x_index + 1) % 16).to_vec();
        }
        let y2: Vec<Complex> = y.iter().map(|v| v * 2.0).collect();
        let out = forward(&p, &cfg, &cons, &pert, &y2).unwrap();
        for pos in 0..=i {
            for (a, b) in out.class_probs[pos].iter().zip(&base.class_probs[pos]) {
                assert!((a - b).abs() < 1e-12, "position {pos} changed after perturbing past {i}");
            }
        }
        assert_ne!(out.class_probs[i + 1], base.class_probs[i + 1]);
    }
}

#[test]
fn unmasked_unpositioned_model_is_pair_permutation_invariant() {
    let mut cfg = small_cfg();
    cfg.use_causal_mask = false;
    cfg.use_positional = false;
    let cons = Constellation::qam4(2);
    let p = lively_params(&cfg, 14);
    let (ctx, y) = random_instance(7, 15);
    let base = forward(&p, &cfg, &cons, &ctx, &y).unwrap();
    let mut perm = ctx.clone();
    perm.pairs.reverse();
    perm.pairs.swap(0, 3);
    let out = forward(&p, &cfg, &cons, &perm, &y).unwrap();
    for (a, b) in out.final_estimate().iter().zip(base.final_estimate()) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_cfg();
    let cons = Constellation::qam4(2);
    let p = lively_params(&cfg, 16);
    let (ctx, y) = random_instance(8, 17);
    let a = forward(&p, &cfg, &cons, &ctx, &y).unwrap();
    let b = forward(&p.clone(), &cfg, &cons, &ctx, &y).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predict_batch_matches_single_forward() {
    let cfg = small_cfg();
    let cons = Constellation::qam4(2);
    let p = lively_params(&cfg, 18);
    let inst: Vec<_> = (0..5).map(|i| random_instance(4, 200 + i)).collect();
    let items: Vec<(&ContextSet, &[Complex])> = inst.iter().map(|(c, y)| (c, y.as_slice())).collect();
    let batch = predict_batch(&p, &cfg, &cons, &items).unwrap();
    for ((ctx, y), b) in inst.iter().zip(&batch) {
        let single = forward(&p, &cfg, &cons, ctx, y).unwrap();
        for (u, v) in single.final_estimate().iter().zip(b) {
            assert!((u - v).norm() < 1e-14);
        }
    }
    let (short, y) = random_instance(3, 1);
    let mixed = vec![items[0], (&short, y.as_slice())];
    assert!(predict_batch(&p, &cfg, &cons, &mixed).is_err());
}

#[test]
fn fresh_init_estimates_are_centered() {
    let cfg = ModelConfig::new(2, 2, 2, 4, 32, 64, 20).unwrap();
    let cons = Constellation::qam4(2);
    let p = ModelParams::init(&cfg, &mut RngStream::new(21, 0));
    let mut sum = [c(0.0, 0.0); 2];
    let draws = 1000;
    for i in 0..draws {
        let (ctx, y) = random_instance(i % 21, 1000 + i as u64);
        let out = forward(&p, &cfg, &cons, &ctx, &y).unwrap();
        for (s, v) in sum.iter_mut().zip(out.final_estimate()) {
            *s += v;
        }
    }
    let norm = sum.iter().map(|s| (s / draws as f64).norm_sqr()).sum::<f64>().sqrt();
    assert!(norm <= 0.1, "mean estimate norm {norm}");
}

#[test]
fn init_respects_layout() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngStream::new(1, 1));
    p.check_shapes(&cfg).unwrap();
    assert_eq!(p.tensors().len(), p.n_tensors());
    assert!(p.layers[0].ln_gain.as_slice().iter().all(|&g| g == 1.0));
    assert!(p.layers[1].ln_bias.as_slice().iter().all(|&b| b == 0.0));
    assert!(p.head_b.as_slice().iter().all(|&b| b == 0.0));
    let w = p.layers[0].w_2.as_slice();
    let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    assert!((var.sqrt() - INIT_STD).abs() < 0.004);

    let other = ModelConfig::new(2, 2, 2, 2, 16, 16, 8).unwrap();
    assert!(matches!(p.check_shapes(&other), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn soft_estimate_examples() {
    let cons = Constellation::qam4(2);
    for k in 0..16 {
        let mut probs = vec![0.0; 16];
        probs[k] = 1.0;
        assert_eq!(soft_estimate(&probs, &cons).unwrap(), cons.input(k).to_vec());
    }
    let uniform = soft_estimate(&[1.0 / 16.0; 16], &cons).unwrap();
    assert!(uniform.iter().all(|z| z.norm() < 1e-15));
    assert!(soft_estimate(&[0.5; 16], &cons).is_err());
    assert!(soft_estimate(&[0.25; 4], &cons).is_err());
}

#[test]
fn soft_estimate_of_exact_posterior_is_known_task_mmse() {
    let cons = Constellation::qam4(2);
    let mut rng = RngStream::new(30, 0);
    for bits in [None, Some(3)] {
        let q = Quantizer::from_bits(bits);
        for _ in 0..20 {
            let h = CMatrix::from_vec(2, 2, (0..4).map(|_| rng.standard_complex_normal()).collect()).unwrap();
            let task = Task::new(h, 0.2).unwrap();
            let y = apply_channel(&task, &q, cons.input(rng.index(16)), &mut rng);
            let post = input_posterior(&task, &q, &cons, &y).unwrap();
            let a = soft_estimate(&post.probs, &cons).unwrap();
            let b = mmse_known_task(&task, &q, &cons, &y).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).norm() <= 1e-12);
            }
        }
    }
}

proptest::proptest! {
    #[test]
    fn outputs_are_distributions_over_the_constellation(seed in 0u64..1000, n in 0usize..9) {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, &mut RngStream::new(seed, 7));
        let (ctx, y) = random_instance(n, seed);
        let cons = Constellation::qam4(2);
        let out = forward(&params, &cfg, &cons, &ctx, &y).unwrap();
        proptest::prop_assert_eq!(out.class_probs.len(), n + 1);
        let bound = cons.max_coordinate() + 1e-12;
        for (p, est) in out.class_probs.iter().zip(&out.soft_estimates) {
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            proptest::prop_assert!(est.iter().all(|z| z.re.abs() <= bound && z.im.abs() <= bound));
        }
    }
}
