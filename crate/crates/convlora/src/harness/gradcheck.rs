//! Central finite-difference audit of every differentiable op plus the full
//! adapter layer, runnable from the CLI and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{conv_lora_apply, moe_balance_loss};
use crate::error::Result;
use crate::tensor::finite_diff_check;

const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Values bounded away from zero, for denominators.
fn rand_away(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Scores with guaranteed separation so top-k membership is stable under the
/// finite-difference step.
fn spread_scores(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let mut base: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        for v in &mut base {
            *v += rng.gen_range(-0.2..0.2);
        }
        // Random permutation so the winner varies.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            base.swap(i, j);
        }
        out.extend(base);
    }
    out
}

/// Run the whole suite for one seed; returns (op name, max relative error)
/// per entry.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, f64)> = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, $f:expr) => {
            let err = finite_diff_check($f, &$inputs, H)?;
            out.push(($name.to_string(), err));
        };
    }

    let a = randn(&mut rng, 6);
    let b = rand_away(&mut rng, 6);
    let two = |a: &Vec<f64>, b: &Vec<f64>| {
        vec![(a.clone(), vec![2, 3]), (b.clone(), vec![2, 3])]
    };

    check!("add", two(&a, &b), |_, l| l[0].add(&l[1])?.mul(&l[0])?.sum_all());
    check!("sub", two(&a, &b), |_, l| l[0].sub(&l[1])?.mul(&l[0])?.sum_all());
    check!("mul", two(&a, &b), |_, l| l[0].mul(&l[1])?.sum_all());
    check!("div", two(&a, &b), |_, l| l[0].div(&l[1])?.sum_all());
    check!("neg", vec![(a.clone(), vec![2, 3])], |_, l| l[0]
        .neg()?
        .mul(&l[0])?
        .sum_all());
    check!("sigmoid", vec![(a.clone(), vec![2, 3])], |_, l| l[0]
        .sigmoid()?
        .mul(&l[0])?
        .sum_all());
    check!("softplus", vec![(a.clone(), vec![2, 3])], |_, l| l[0]
        .softplus()?
        .mul(&l[0])?
        .sum_all());
    check!("gelu", vec![(a.clone(), vec![2, 3])], |_, l| l[0]
        .gelu()?
        .mul(&l[0])?
        .sum_all());
    check!("affine", vec![(a.clone(), vec![2, 3])], |_, l| l[0]
        .affine(1.3, -0.4)?
        .mul(&l[0])?
        .sum_all());
    check!("scale", vec![(a.clone(), vec![2, 3])], |_, l| l[0]
        .scale(0.7)?
        .mul(&l[0])?
        .sum_all());

    let m1 = randn(&mut rng, 12);
    let m2 = randn(&mut rng, 8);
    check!(
        "matmul",
        vec![(m1.clone(), vec![3, 4]), (m2.clone(), vec![4, 2])],
        |_, l| {
            let y = l[0].matmul(&l[1])?;
            y.mul(&y)?.sum_all()
        }
    );
    let bm1 = randn(&mut rng, 24);
    let bm2 = randn(&mut rng, 16);
    check!(
        "matmul_batched",
        vec![(bm1, vec![2, 3, 4]), (bm2, vec![2, 4, 2])],
        |_, l| {
            let y = l[0].matmul(&l[1])?;
            y.mul(&y)?.sum_all()
        }
    );

    let cx = randn(&mut rng, 2 * 2 * 4 * 4);
    let ck = randn(&mut rng, 2 * 2 * 9);
    let cb = randn(&mut rng, 2);
    check!(
        "conv3x3",
        vec![
            (cx.clone(), vec![2, 2, 4, 4]),
            (ck, vec![2, 2, 3, 3]),
            (cb, vec![2]),
        ],
        |_, l| {
            let y = l[0].conv3x3(&l[1], &l[2])?;
            y.mul(&y)?.sum_all()
        }
    );

    let ix = randn(&mut rng, 2 * 4 * 4);
    check!("interp_up", vec![(ix.clone(), vec![1, 2, 4, 4])], |_, l| {
        let y = l[0].interpolate_bilinear(2.0)?;
        y.mul(&y)?.sum_all()
    });
    check!("interp_down", vec![(ix.clone(), vec![1, 2, 4, 4])], |_, l| {
        let y = l[0].interpolate_bilinear(0.5)?;
        y.mul(&y)?.sum_all()
    });
    check!("interp_to", vec![(ix.clone(), vec![1, 2, 4, 4])], |_, l| {
        let y = l[0].interpolate_to(3, 5)?;
        y.mul(&y)?.sum_all()
    });

    let sm = randn(&mut rng, 8);
    check!("softmax", vec![(sm.clone(), vec![2, 4])], |_, l| {
        let y = l[0].softmax_axis(1)?;
        y.mul(&y)?.sum_all()
    });
    check!("log_softmax", vec![(sm.clone(), vec![2, 4])], |_, l| {
        let y = l[0].log_softmax_axis(1)?;
        y.mul(&l[0])?.sum_all()
    });
    let tk = spread_scores(&mut rng, 2, 5);
    check!("topk_softmax", vec![(tk, vec![2, 5])], |_, l| {
        let y = l[0].topk_softmax(2)?;
        y.mul(&y)?.sum_all()
    });

    let r3 = randn(&mut rng, 12);
    check!("sum_axis", vec![(r3.clone(), vec![2, 3, 2])], |_, l| {
        let y = l[0].sum_axis(1)?;
        y.mul(&y)?.sum_all()
    });
    check!("mean_axis", vec![(r3.clone(), vec![2, 3, 2])], |_, l| {
        let y = l[0].mean_axis(1)?;
        y.mul(&y)?.sum_all()
    });
    check!("sum_all", vec![(r3.clone(), vec![2, 3, 2])], |_, l| {
        let y = l[0].sum_all()?;
        y.mul(&y)?.sum_all()
    });
    check!("mean_all", vec![(r3.clone(), vec![2, 3, 2])], |_, l| {
        let y = l[0].mean_all()?;
        y.mul(&y)?.sum_all()
    });

    let bb = randn(&mut rng, 3);
    check!(
        "add_broadcast",
        vec![(a.clone(), vec![2, 3]), (bb, vec![3])],
        |_, l| {
            let y = l[0].add_broadcast(&l[1])?;
            y.mul(&y)?.sum_all()
        }
    );
    let sc = randn(&mut rng, 2);
    check!(
        "mul_batch_scalar",
        vec![(a.clone(), vec![2, 3]), (sc, vec![2])],
        |_, l| {
            let y = l[0].mul_batch_scalar(&l[1])?;
            y.mul(&y)?.sum_all()
        }
    );
    check!("select_batch", vec![(r3.clone(), vec![4, 3])], |_, l| {
        let y = l[0].select_batch(&[2, 0])?;
        y.mul(&y)?.sum_all()
    });
    check!("select_last", vec![(sm.clone(), vec![2, 4])], |_, l| {
        let y = l[0].select_last(&[3, 1])?;
        y.mul(&y)?.sum_all()
    });
    check!("expand_leading", vec![(bb_like(&mut rng), vec![3])], |_, l| {
        let y = l[0].expand_leading(4)?;
        y.mul(&y)?.sum_all()
    });

    let ln = randn(&mut rng, 12);
    let lg = rand_away(&mut rng, 6);
    let lb = randn(&mut rng, 6);
    check!(
        "layer_norm",
        vec![(ln, vec![2, 6]), (lg, vec![6]), (lb, vec![6])],
        |_, l| {
            let y = l[0].layer_norm(&l[1], &l[2], 1e-6)?;
            y.mul(&y)?.sum_all()
        }
    );
    let gp = randn(&mut rng, 2 * 3 * 16);
    check!("global_avg_pool", vec![(gp, vec![2, 3, 4, 4])], |_, l| {
        let y = l[0].global_avg_pool()?;
        y.mul(&y)?.sum_all()
    });
    check!("permute_reshape", vec![(r3.clone(), vec![2, 3, 2])], |_, l| {
        let y = l[0].permute(&[1, 0, 2])?.reshape(&[3, 4])?;
        y.mul(&y)?.sum_all()
    });

    // The full Conv-LoRA layer with noise off: x through frozen base plus
    // gated scale-specialized experts, including the balance penalty.
    let (bs, cin, cout, r, n) = (2usize, 4usize, 3usize, 2usize, 3usize);
    let w0v = randn(&mut rng, cout * cin);
    let mut inputs: Vec<(Vec<f64>, Vec<usize>)> = vec![
        (randn(&mut rng, bs * cin * 16), vec![bs, cin, 4, 4]),
        (randn(&mut rng, r * cin), vec![r, cin]),
        (randn(&mut rng, cout * r), vec![cout, r]),
    ];
    for _ in 0..n {
        inputs.push((randn(&mut rng, r * r * 9), vec![r, r, 3, 3]));
        inputs.push((randn(&mut rng, r), vec![r]));
    }
    inputs.push((spread_scores(&mut rng, r, n), vec![r, n]));
    check!("conv_lora_layer", inputs, |g, l| {
        let w0 = g.constant(w0v.clone(), &[cout, cin])?;
        let wn = g.zeros(&[r, n], false);
        let experts: Vec<_> = (0..n)
            .map(|i| (l[3 + 2 * i].clone(), l[4 + 2 * i].clone(), (i + 1) as f64))
            .collect();
        let mut evals = 0u64;
        let (y, d) = conv_lora_apply(
            &l[0],
            &w0,
            &l[1],
            &l[2],
            &experts,
            &l[3 + 2 * n],
            &wn,
            2,
            None,
            &mut evals,
        )?;
        let balance = moe_balance_loss(g, &[&d], 2.0)?;
        y.mul(&y)?.sum_all()?.add(&balance)
    });

    Ok(out)
}

fn bb_like(rng: &mut ChaCha8Rng) -> Vec<f64> {
    randn(rng, 3)
}
