use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::finite_diff_check;

type G = Graph<f64>;

fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Identity-on-center 3x3 kernel for r channels: out c reads in c's center tap.
fn delta_kernel(r: usize) -> Vec<f64> {
    let mut k = vec![0.0; r * r * 9];
    for c in 0..r {
        k[c * r * 9 + c * 9 + 4] = 1.0;
    }
    k
}

#[test]
fn lora_zero_decoder_matches_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = G::new();
    let (b, cin, cout, r, h, w) = (2, 5, 4, 2, 3, 3);
    let x = g.constant(randn(&mut rng, b * cin * h * w, 1.0), &[b, cin, h, w]).unwrap();
    let w0 = g.constant(randn(&mut rng, cout * cin, 1.0), &[cout, cin]).unwrap();
    let we = g.constant(randn(&mut rng, r * cin, 1.0), &[r, cin]).unwrap();
    let wd = g.constant(vec![0.0; cout * r], &[cout, r]).unwrap();
    let out = lora_forward(&x, &w0, &we, &wd).unwrap();
    let base = channel_map(&x, &w0).unwrap();
    assert!(max_abs_diff(&out.value(), &base.value()) < 1e-12);
}

#[test]
fn lora_matches_per_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = G::new();
    let (b, cin, cout, r, h, w) = (2, 4, 3, 2, 2, 3);
    let xv = randn(&mut rng, b * cin * h * w, 1.0);
    let w0v = randn(&mut rng, cout * cin, 1.0);
    let wev = randn(&mut rng, r * cin, 1.0);
    let wdv = randn(&mut rng, cout * r, 1.0);
    let x = g.constant(xv.clone(), &[b, cin, h, w]).unwrap();
    let w0 = g.constant(w0v.clone(), &[cout, cin]).unwrap();
    let we = g.constant(wev.clone(), &[r, cin]).unwrap();
    let wd = g.constant(wdv.clone(), &[cout, r]).unwrap();
    let out = lora_forward(&x, &w0, &we, &wd).unwrap().value();

    let mut want = vec![0.0; b * cout * h * w];
    for bi in 0..b {
        for hh in 0..h {
            for ww in 0..w {
                let xp: Vec<f64> = (0..cin).map(|c| xv[((bi * cin + c) * h + hh) * w + ww]).collect();
                let zp: Vec<f64> = (0..r)
                    .map(|ri| (0..cin).map(|c| wev[ri * cin + c] * xp[c]).sum())
                    .collect();
                for co in 0..cout {
                    let base: f64 = (0..cin).map(|c| w0v[co * cin + c] * xp[c]).sum();
                    let delta: f64 = (0..r).map(|ri| wdv[co * r + ri] * zp[ri]).sum();
                    want[((bi * cout + co) * h + hh) * w + ww] = base + delta;
                }
            }
        }
    }
    assert!(max_abs_diff(&out, &want) < 1e-12);
}

#[test]
fn channel_map_rejects_mismatched_channels() {
    let g = G::new();
    let x = g.zeros(&[1, 3, 2, 2], false);
    let w = g.zeros(&[4, 5], false);
    assert!(matches!(channel_map(&x, &w), Err(Error::Dimension(_))));
}

#[test]
fn expert_scale_one_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = G::new();
    let r = 3;
    let z = g.constant(randn(&mut rng, 2 * r * 4 * 5, 1.0), &[2, r, 4, 5]).unwrap();
    let k = g.constant(delta_kernel(r), &[r, r, 3, 3]).unwrap();
    let bias = g.zeros(&[r], false);
    let out = expert_forward(&z, &k, &bias, 1.0).unwrap();
    assert!(max_abs_diff(&out.value(), &z.value()) < 1e-12);
}

#[test]
fn expert_preserves_constant_fields_across_scales() {
    let g = G::new();
    let r = 2;
    for scale in [0.5, 2.0, 3.0] {
        let z = g.constant(vec![0.7; r * 6 * 6], &[1, r, 6, 6]).unwrap();
        let k = g.constant(delta_kernel(r), &[r, r, 3, 3]).unwrap();
        let bias = g.zeros(&[r], false);
        let out = expert_forward(&z, &k, &bias, scale).unwrap();
        assert_eq!(out.shape(), vec![1, r, 6, 6]);
        assert!(max_abs_diff(&out.value(), &z.value()) < 1e-12, "scale {scale}");
    }
}

#[test]
fn expert_matches_sequential_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = G::new();
    let r = 2;
    let z = g.constant(randn(&mut rng, r * 4 * 4, 1.0), &[1, r, 4, 4]).unwrap();
    let k = g.constant(randn(&mut rng, r * r * 9, 0.3), &[r, r, 3, 3]).unwrap();
    let bias = g.constant(randn(&mut rng, r, 0.1), &[r]).unwrap();
    let out = expert_forward(&z, &k, &bias, 2.0).unwrap();
    let want = z
        .interpolate_bilinear(2.0)
        .unwrap()
        .conv3x3(&k, &bias)
        .unwrap()
        .interpolate_to(4, 4)
        .unwrap();
    assert!(max_abs_diff(&out.value(), &want.value()) < 1e-12);
}

#[test]
fn gate_top1_picks_highest_score() {
    let g = G::new();
    // pooled = [1, 0]; wg maps it to scores [0.1, 0.9, 0.4].
    let z = g.constant(vec![1.0, 0.0], &[1, 2, 1, 1]).unwrap();
    let wg = g.constant(vec![0.1, 0.9, 0.4, 0.0, 0.0, 0.0], &[2, 3]).unwrap();
    let wn = g.zeros(&[2, 3], false);
    let d = gate_scores(&z, &wg, &wn, 1, None).unwrap();
    assert_eq!(d.gate.value(), vec![0.0, 1.0, 0.0]);
    assert_eq!(d.active, vec![vec![1]]);
    assert!(max_abs_diff(&d.scores, &[0.1, 0.9, 0.4]) < 1e-12);
}

#[test]
fn gate_ties_route_to_lowest_index() {
    let g = G::new();
    let z = g.constant(vec![1.0, 2.0], &[1, 2, 1, 1]).unwrap();
    let wg = g.zeros(&[2, 4], false);
    let wn = g.zeros(&[2, 4], false);
    let d = gate_scores(&z, &wg, &wn, 1, None).unwrap();
    assert_eq!(d.gate.value(), vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(d.active, vec![vec![0]]);
}

#[test]
fn gate_top2_matches_masked_softmax() {
    let g = G::new();
    let z = g.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let wg = g.constant(vec![0.2, 1.0, -0.3], &[1, 3]).unwrap();
    let wn = g.zeros(&[1, 3], false);
    let d = gate_scores(&z, &wg, &wn, 2, None).unwrap();
    // Kept: indices 1 and 0. Softmax over {0.2, 1.0}.
    let e0 = (0.2f64).exp();
    let e1 = (1.0f64).exp();
    let want = [e0 / (e0 + e1), e1 / (e0 + e1), 0.0];
    assert!(max_abs_diff(&d.gate.value(), &want) < 1e-12);
    assert_eq!(d.active, vec![vec![0, 1]]);
}

#[test]
fn gate_noise_perturbs_scores_deterministically_by_seed() {
    let g = G::new();
    let z = g.constant(vec![1.0, -0.5], &[1, 2, 1, 1]).unwrap();
    let wg = g.constant(vec![0.3, -0.1, 0.2, 0.5], &[2, 2]).unwrap();
    let wn = g.zeros(&[2, 2], false);
    let clean = gate_scores(&z, &wg, &wn, 1, None).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(7);
    let noisy1 = gate_scores(&z, &wg, &wn, 1, Some(&mut r1)).unwrap();
    let mut r2 = ChaCha8Rng::seed_from_u64(7);
    let noisy2 = gate_scores(&z, &wg, &wn, 1, Some(&mut r2)).unwrap();
    // Zero noise weights still give softplus(0) = ln 2 noise magnitude.
    assert!(max_abs_diff(&noisy1.scores, &clean.scores) > 1e-6);
    assert!(max_abs_diff(&noisy1.scores, &noisy2.scores) < 1e-15);
}

fn random_layer(
    rng: &mut ChaCha8Rng,
    g: &G,
    b: usize,
    cin: usize,
    cout: usize,
    r: usize,
    n: usize,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<(Tensor<f64>, Tensor<f64>, f64)>, Tensor<f64>) {
    let (h, w) = (4, 4);
    let x = g.constant(randn(rng, b * cin * h * w, 1.0), &[b, cin, h, w]).unwrap();
    let w0 = g.constant(randn(rng, cout * cin, 0.5), &[cout, cin]).unwrap();
    let we = g.constant(randn(rng, r * cin, 0.5), &[r, cin]).unwrap();
    let wd = g.constant(randn(rng, cout * r, 0.5), &[cout, r]).unwrap();
    let experts = (0..n)
        .map(|i| {
            (
                g.constant(randn(rng, r * r * 9, 0.3), &[r, r, 3, 3]).unwrap(),
                g.constant(randn(rng, r, 0.1), &[r]).unwrap(),
                (i + 1) as f64,
            )
        })
        .collect();
    let wg = g.constant(randn(rng, r * n, 0.5), &[r, n]).unwrap();
    (x, w0, we, wd, experts, wg)
}

#[test]
fn sparse_routing_matches_dense_evaluation() {
    for k in [1usize, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + k as u64);
        let g = G::new();
        let (b, n) = (4, 3);
        let (x, w0, we, wd, experts, wg) = random_layer(&mut rng, &g, b, 5, 4, 2, n);
        let wn = g.zeros(&[2, n], false);
        let mut evals = 0u64;
        let (sparse, d) =
            conv_lora_apply(&x, &w0, &we, &wd, &experts, &wg, &wn, k, None, &mut evals).unwrap();
        assert_eq!(evals, (k * b) as u64);

        // Dense oracle: run every expert on the full batch, weight by the
        // same gate values (zeros included), no select/scatter anywhere.
        let z = channel_map(&x, &we).unwrap();
        let gv = d.gate.value();
        let mut acc: Option<Tensor<f64>> = None;
        for (i, (kern, bias, s)) in experts.iter().enumerate() {
            let out = expert_forward(&z, kern, bias, *s).unwrap();
            let coeff: Vec<f64> = (0..b).map(|bi| gv[bi * n + i]).collect();
            let coeff = g.constant(coeff, &[b]).unwrap();
            let wo = out.mul_batch_scalar(&coeff).unwrap();
            acc = Some(match acc {
                Some(a) => a.add(&wo).unwrap(),
                None => wo,
            });
        }
        let dense = channel_map(&x, &w0)
            .unwrap()
            .add(&channel_map(&acc.unwrap(), &wd).unwrap())
            .unwrap();
        assert!(
            max_abs_diff(&sparse.value(), &dense.value()) < 1e-12,
            "k = {k}"
        );
    }
}

#[test]
fn multiscale_is_mean_of_experts() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let g = G::new();
    let (b, n) = (3, 3);
    let (x, w0, we, wd, experts, _) = random_layer(&mut rng, &g, b, 4, 4, 2, n);
    let mut evals = 0u64;
    let out = multiscale_apply(&x, &w0, &we, &wd, &experts, &mut evals).unwrap();
    assert_eq!(evals, (n * b) as u64);

    let z = channel_map(&x, &we).unwrap();
    let mut acc: Option<Tensor<f64>> = None;
    for (kern, bias, s) in &experts {
        let o = expert_forward(&z, kern, bias, *s).unwrap();
        acc = Some(match acc {
            Some(a) => a.add(&o).unwrap(),
            None => o,
        });
    }
    let mean = acc.unwrap().scale(1.0 / n as f64).unwrap();
    let want = channel_map(&x, &w0)
        .unwrap()
        .add(&channel_map(&mean, &wd).unwrap())
        .unwrap();
    assert!(max_abs_diff(&out.value(), &want.value()) < 1e-12);
}

#[test]
fn fresh_adapter_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut ps: ParamSet<f64> = ParamSet::new();
    let cfg = AdapterConfig::conv_lora_default(6, 6);
    let adapter = init_adapter(&mut ps, "layer0", &cfg, &mut rng).unwrap();

    let mut sess = Session::new();
    let x = sess
        .constant(randn(&mut rng, 2 * 6 * 4 * 4, 1.0), &[2, 6, 4, 4])
        .unwrap();
    let w0 = sess
        .constant(randn(&mut rng, 36, 0.5), &[6, 6])
        .unwrap();
    let mut evals = 0u64;
    let (out, d) = adapter
        .forward(&mut sess, &x, &w0, Mode::Eval, None, &mut evals)
        .unwrap();
    let base = channel_map(&x, &w0).unwrap();
    assert!(max_abs_diff(&out.value(), &base.value()) < 1e-12);
    let d = d.unwrap();
    // Zero gate weights: every sample ties to expert 0 at top-1.
    assert_eq!(d.active, vec![vec![0], vec![0]]);
    assert_eq!(evals, 2);
}

#[test]
fn adapter_param_count_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (cin, cout) = (16, 12);
    for (r, n, kind) in [
        (3, 8, AdapterKind::ConvLora),
        (4, 5, AdapterKind::ConvLora),
        (2, 3, AdapterKind::MultiScale),
        (3, 0, AdapterKind::Lora),
    ] {
        let cfg = AdapterConfig {
            c_in: cin,
            c_out: cout,
            rank: r,
            scales: (1..=n).map(|s| s as f64).collect(),
            top_k: 1,
            kind: kind.clone(),
        };
        let mut ps: ParamSet<f64> = ParamSet::new();
        let a = init_adapter(&mut ps, "a", &cfg, &mut rng).unwrap();
        let mut want = r * (cin + cout) + n * (9 * r * r + r);
        if kind == AdapterKind::ConvLora {
            want += 2 * r * n;
        }
        assert_eq!(a.param_count(), want, "r={r} n={n} {kind:?}");
        let (trainable, total) = ps.count();
        assert_eq!(trainable, want);
        assert_eq!(total, want);
    }
}

#[test]
fn config_validation_rejects_bad_settings() {
    assert!(AdapterConfig::lora(4, 4, 4).validate().is_err());
    assert!(AdapterConfig::lora(4, 4, 0).validate().is_err());
    let mut c = AdapterConfig::conv_lora_default(8, 8);
    c.top_k = 9;
    assert!(c.validate().is_err());
    let mut c = AdapterConfig::conv_lora_default(8, 8);
    c.scales = vec![1.0, -2.0];
    assert!(c.validate().is_err());
    let mut c = AdapterConfig::conv_lora_default(8, 8);
    c.scales.clear();
    assert!(c.validate().is_err());
    assert!(AdapterConfig::conv_lora_default(8, 8).validate().is_ok());
}

#[test]
fn eval_mode_ignores_rng() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut ps: ParamSet<f64> = ParamSet::new();
    let mut cfg = AdapterConfig::conv_lora_default(5, 5);
    cfg.rank = 2;
    let adapter = init_adapter(&mut ps, "l", &cfg, &mut rng).unwrap();
    let xv = randn(&mut rng, 5 * 4 * 4, 1.0);
    let w0v = randn(&mut rng, 25, 0.5);
    let run = |mode, seed| {
        let mut sess = Session::new();
        let x = sess.constant(xv.clone(), &[1, 5, 4, 4]).unwrap();
        let w0 = sess.constant(w0v.clone(), &[5, 5]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut evals = 0u64;
        let (out, d) = adapter
            .forward(&mut sess, &x, &w0, mode, Some(&mut r), &mut evals)
            .unwrap();
        (out.value(), d.unwrap().scores)
    };
    let (o1, s1) = run(Mode::Eval, 1);
    let (o2, s2) = run(Mode::Eval, 2);
    assert!(max_abs_diff(&o1, &o2) < 1e-15);
    assert!(max_abs_diff(&s1, &s2) < 1e-15);
    // Train mode with different seeds draws different noise.
    let (_, t1) = run(Mode::Train, 1);
    let (_, t2) = run(Mode::Train, 2);
    assert!(max_abs_diff(&t1, &t2) > 1e-9);
}

#[test]
fn balance_loss_uniform_gate_is_zero() {
    let g = G::new();
    let gate = g.constant(vec![0.25; 4 * 4], &[4, 4]).unwrap();
    let d = GateDecision {
        gate,
        active: vec![],
        scores: vec![],
    };
    let loss = moe_balance_loss(&g, &[&d], 1.0).unwrap();
    assert!(loss.item().abs() < 1e-12);
}

#[test]
fn balance_loss_one_hot_cv2_is_n_minus_one() {
    // All samples routed to expert 0 out of n=8: CV^2 = 7 exactly.
    let g = G::new();
    let b = 5;
    let mut gv = vec![0.0; b * 8];
    for bi in 0..b {
        gv[bi * 8] = 1.0;
    }
    let gate = g.constant(gv, &[b, 8]).unwrap();
    let d = GateDecision {
        gate,
        active: vec![],
        scores: vec![],
    };
    for weight in [1.0, 2.0] {
        let loss = moe_balance_loss(&g, &[&d], weight).unwrap();
        assert!((loss.item() - 7.0 * weight).abs() < 1e-12, "weight {weight}");
    }
}

#[test]
fn balance_loss_sums_importance_across_layers() {
    // Two layers whose imbalances cancel: combined importance is uniform.
    let g = G::new();
    let g1 = g.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
    let g2 = g.constant(vec![0.0, 1.0], &[1, 2]).unwrap();
    let d1 = GateDecision { gate: g1, active: vec![], scores: vec![] };
    let d2 = GateDecision { gate: g2, active: vec![], scores: vec![] };
    let loss = moe_balance_loss(&g, &[&d1, &d2], 1.0).unwrap();
    assert!(loss.item().abs() < 1e-12);
    assert_eq!(moe_balance_loss(&g, &[], 1.0).unwrap().item(), 0.0);
}

#[test]
fn full_layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let (b, cin, cout, r, n, h, w) = (2, 4, 3, 2, 3, 3, 3);
    let inputs: Vec<(Vec<f64>, Vec<usize>)> = vec![
        (randn(&mut rng, b * cin * h * w, 1.0), vec![b, cin, h, w]),
        (randn(&mut rng, r * cin, 0.5), vec![r, cin]),
        (randn(&mut rng, cout * r, 0.5), vec![cout, r]),
        (randn(&mut rng, r * r * 9, 0.3), vec![r, r, 3, 3]),
        (randn(&mut rng, r, 0.1), vec![r]),
        (randn(&mut rng, r * r * 9, 0.3), vec![r, r, 3, 3]),
        (randn(&mut rng, r, 0.1), vec![r]),
        (randn(&mut rng, r * r * 9, 0.3), vec![r, r, 3, 3]),
        (randn(&mut rng, r, 0.1), vec![r]),
        (randn(&mut rng, r * n, 0.8), vec![r, n]),
    ];
    let w0v = randn(&mut rng, cout * cin, 0.5);
    let err = finite_diff_check(
        |g, leaves| {
            let w0 = g.constant(w0v.clone(), &[cout, cin])?;
            let wn = g.zeros(&[r, n], false);
            let experts = vec![
                (leaves[3].clone(), leaves[4].clone(), 1.0),
                (leaves[5].clone(), leaves[6].clone(), 2.0),
                (leaves[7].clone(), leaves[8].clone(), 3.0),
            ];
            let mut evals = 0u64;
            let (out, d) = conv_lora_apply(
                &leaves[0], &w0, &leaves[1], &leaves[2], &experts, &leaves[9], &wn, 2, None,
                &mut evals,
            )?;
            let balance = moe_balance_loss(g, &[&d], 2.0)?;
            out.mul(&out)?.sum_all()?.add(&balance)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn frozen_base_weight_gets_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut ps: ParamSet<f64> = ParamSet::new();
    let mut cfg = AdapterConfig::conv_lora_default(5, 5);
    cfg.rank = 2;
    let adapter = init_adapter(&mut ps, "l", &cfg, &mut rng).unwrap();
    // Make the decoder nonzero so gradients actually flow into the experts.
    adapter.lora.wd.borrow_mut().data = randn(&mut rng, 5 * 2, 0.5);
    let w0p = ps.create("l.w0", &[5, 5], randn(&mut rng, 25, 0.5), false);

    let mut sess = Session::new();
    let x = sess.constant(randn(&mut rng, 5 * 4 * 4, 1.0), &[1, 5, 4, 4]).unwrap();
    let w0 = sess.bind(&w0p).unwrap();
    let mut evals = 0u64;
    let (out, _) = adapter
        .forward(&mut sess, &x, &w0, Mode::Eval, None, &mut evals)
        .unwrap();
    let loss = out.mul(&out).unwrap().sum_all().unwrap();
    let grads = sess.backward(&loss).unwrap();
    assert!(grads.get("l.w0").is_none());
    let gwe = grads.get("l.we").unwrap();
    assert!(gwe.iter().any(|v| v.abs() > 1e-8));
}
