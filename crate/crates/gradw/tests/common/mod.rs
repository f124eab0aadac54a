//! Shared test support: the central finite-difference oracle and the
//! per-primitive gradient checks built on it. The oracle only ever calls
//! op forwards; it never touches the backward pass it is checking.

#![allow(dead_code)]

use gradw::seeds;
use gradw::tape::{BcastDomain, ConvMode, NormMode, PointwiseKind, ReduceKind, StatsMode, Tape};
use gradw::tensor::{Precision, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite differences of a scalar function, step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn mixed_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform in [-hi, -lo] ∪ [lo, hi]: keeps relu/abs inputs away from kinks.
pub fn uniform_vec_away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// One FD check: `build` maps the differentiable input (passed as an
/// on-tape leaf) to an output tensor; the scalar under test is the probe-
/// weighted sum of that output. Panics if any element disagrees beyond
/// `tol` in mixed relative error. Returns the number of elements checked.
pub fn fd_check(
    label: &str,
    precision: Precision,
    h: f64,
    tol: f64,
    x0: &[f64],
    x_shape: &[usize],
    probe: &[f64],
    build: &dyn Fn(&Tape, &Tensor) -> Tensor,
) -> usize {
    // autodiff gradient via a tap on the input leaf
    let tape = Tape::new(precision);
    let x = tape.leaf(x0.to_vec(), x_shape);
    tape.mark_tap(&x).unwrap();
    let y = build(&tape, &x);
    assert_eq!(y.len(), probe.len(), "{label}: probe length");
    let p = tape.constant(probe.to_vec(), y.shape());
    let weighted = tape.mul(&y, &p).unwrap();
    let scalar = tape.sum_all(&weighted).unwrap();
    let out = tape.backward_to(&scalar, &[&x]).unwrap();
    let ad = &out.tap_grads[0].values;

    // finite differences over fresh forward passes
    let mut eval = |xv: &[f64]| -> f64 {
        let t = Tape::new(precision);
        let xt = t.leaf(xv.to_vec(), x_shape);
        let y = build(&t, &xt);
        y.values()
            .iter()
            .zip(probe)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let fd = central_diff(&mut eval, x0, h);

    for (i, (a, f)) in ad.iter().zip(&fd).enumerate() {
        let e = mixed_rel_err(*a, *f);
        assert!(
            e <= tol,
            "{label}[{i}]: autodiff {a} vs central-diff {f} (rel err {e:.3e} > {tol:.1e})"
        );
    }
    ad.len()
}

/// Runs `instances` seeded FD checks over every tape primitive, exercising
/// each differentiable input role. Returns the total number of gradient
/// elements verified.
pub fn fd_check_primitives(precision: Precision, h: f64, tol: f64, instances: u64) -> usize {
    let mut checked = 0;
    for inst in 0..instances {
        let mut rng = seeds::rng_tagged("fd-primitives", &[inst, precision as u64]);
        checked += fd_instance(precision, h, tol, inst, &mut rng);
    }
    checked
}

fn fd_instance(
    precision: Precision,
    h: f64,
    tol: f64,
    inst: u64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut n = 0;

    // conv, forward mode: input / kernel / bias roles
    {
        let (ci, co, t, f) = (2, 3, 5, 6);
        let stride = if inst % 2 == 0 { (1, 1) } else { (2, 2) };
        let pad = if inst % 3 == 0 { (0, 0) } else { (1, 1) };
        let input = uniform_vec(rng, ci * t * f, -1.5, 1.5);
        let kernel = uniform_vec(rng, co * ci * 9, -0.8, 0.8);
        let bias = uniform_vec(rng, co, -0.5, 0.5);
        let to = ((t + 2 * pad.0 - 3) / stride.0) + 1;
        let fo = ((f + 2 * pad.1 - 3) / stride.1) + 1;
        let probe = uniform_vec(rng, co * to * fo, -1.0, 1.0);

        let (kc, bc, ic) = (kernel.clone(), bias.clone(), input.clone());
        n += fd_check(
            "conv_fwd/input",
            precision,
            h,
            tol,
            &input,
            &[ci, t, f],
            &probe,
            &|tp, x| {
                let k = tp.constant(kc.clone(), &[co, ci, 3, 3]);
                let b = tp.constant(bc.clone(), &[co]);
                tp.conv_layer(x, &k, Some(&b), ConvMode::Forward, stride, pad)
                    .unwrap()
            },
        );
        n += fd_check(
            "conv_fwd/kernel",
            precision,
            h,
            tol,
            &kernel,
            &[co, ci, 3, 3],
            &probe,
            &|tp, k| {
                let x = tp.constant(ic.clone(), &[ci, t, f]);
                let b = tp.constant(bc.clone(), &[co]);
                tp.conv_layer(&x, k, Some(&b), ConvMode::Forward, stride, pad)
                    .unwrap()
            },
        );
        n += fd_check(
            "conv_fwd/bias",
            precision,
            h,
            tol,
            &bias,
            &[co],
            &probe,
            &|tp, b| {
                let x = tp.constant(ic.clone(), &[ci, t, f]);
                let k = tp.constant(kc.clone(), &[co, ci, 3, 3]);
                tp.conv_layer(&x, &k, Some(b), ConvMode::Forward, stride, pad)
                    .unwrap()
            },
        );
    }

    // conv, transposed mode
    {
        let (ci, co, t, f) = (3, 2, 3, 4);
        let stride = if inst % 2 == 0 { (2, 2) } else { (1, 1) };
        let input = uniform_vec(rng, ci * t * f, -1.5, 1.5);
        let kernel = uniform_vec(rng, ci * co * 9, -0.8, 0.8);
        let to = (t - 1) * stride.0 + 3;
        let fo = (f - 1) * stride.1 + 3;
        let probe = uniform_vec(rng, co * to * fo, -1.0, 1.0);
        let (kc, ic) = (kernel.clone(), input.clone());
        n += fd_check(
            "conv_trans/input",
            precision,
            h,
            tol,
            &input,
            &[ci, t, f],
            &probe,
            &|tp, x| {
                let k = tp.constant(kc.clone(), &[ci, co, 3, 3]);
                tp.conv_layer(x, &k, None, ConvMode::Transposed, stride, (0, 0))
                    .unwrap()
            },
        );
        n += fd_check(
            "conv_trans/kernel",
            precision,
            h,
            tol,
            &kernel,
            &[ci, co, 3, 3],
            &probe,
            &|tp, k| {
                let x = tp.constant(ic.clone(), &[ci, t, f]);
                tp.conv_layer(&x, k, None, ConvMode::Transposed, stride, (0, 0))
                    .unwrap()
            },
        );
    }

    // normalization: instance (same math as batch/train) and batch/eval
    {
        let (c, t, f) = (3, 4, 5);
        let input = uniform_vec(rng, c * t * f, -2.0, 2.0);
        let gamma = uniform_vec(rng, c, 0.5, 1.5);
        let beta = uniform_vec(rng, c, -0.5, 0.5);
        let rm = uniform_vec(rng, c, -0.3, 0.3);
        let rv = uniform_vec(rng, c, 0.5, 1.5);
        let probe = uniform_vec(rng, c * t * f, -1.0, 1.0);
        let (gc, bc, ic) = (gamma.clone(), beta.clone(), input.clone());
        n += fd_check(
            "norm_inst/input",
            precision,
            h,
            tol,
            &input,
            &[c, t, f],
            &probe,
            &|tp, x| {
                let g = tp.constant(gc.clone(), &[c]);
                let b = tp.constant(bc.clone(), &[c]);
                tp.normalize_2d(x, NormMode::Instance, &g, &b, StatsMode::Train, None, 1e-5)
                    .unwrap()
                    .0
            },
        );
        n += fd_check(
            "norm_inst/gamma",
            precision,
            h,
            tol,
            &gamma,
            &[c],
            &probe,
            &|tp, g| {
                let x = tp.constant(ic.clone(), &[c, t, f]);
                let b = tp.constant(bc.clone(), &[c]);
                tp.normalize_2d(&x, NormMode::Instance, g, &b, StatsMode::Train, None, 1e-5)
                    .unwrap()
                    .0
            },
        );
        let (rmc, rvc) = (rm.clone(), rv.clone());
        n += fd_check(
            "norm_eval/input",
            precision,
            h,
            tol,
            &input,
            &[c, t, f],
            &probe,
            &|tp, x| {
                let g = tp.constant(gc.clone(), &[c]);
                let b = tp.constant(bc.clone(), &[c]);
                tp.normalize_2d(
                    x,
                    NormMode::Batch,
                    &g,
                    &b,
                    StatsMode::Eval,
                    Some((&rmc, &rvc)),
                    1e-5,
                )
                .unwrap()
                .0
            },
        );
    }

    // pointwise
    {
        let m = 24;
        let xr = uniform_vec_away_from_zero(rng, m, 1e-2, 2.0);
        let probe = uniform_vec(rng, m, -1.0, 1.0);
        n += fd_check("relu", precision, h, tol, &xr, &[m], &probe, &|tp, x| {
            tp.pointwise(x, PointwiseKind::Relu)
        });
        let xs = uniform_vec(rng, m, -3.0, 3.0);
        n += fd_check("sigmoid", precision, h, tol, &xs, &[m], &probe, &|tp, x| {
            tp.pointwise(x, PointwiseKind::Sigmoid)
        });
        n += fd_check("abs", precision, h, tol, &xr, &[m], &probe, &|tp, x| {
            tp.abs(x)
        });
        n += fd_check("scale", precision, h, tol, &xs, &[m], &probe, &|tp, x| {
            tp.scale(x, -1.7)
        });
    }

    // softmax over one axis and over all axes
    {
        let (a, b) = (3, 4);
        let x = uniform_vec(rng, a * b, -2.0, 2.0);
        let probe = uniform_vec(rng, a * b, -1.0, 1.0);
        n += fd_check("softmax/rows", precision, h, tol, &x, &[a, b], &probe, &|tp, x| {
            tp.softmax_over(x, &[1]).unwrap()
        });
        n += fd_check("softmax/all", precision, h, tol, &x, &[a, b], &probe, &|tp, x| {
            tp.softmax_over(x, &[0, 1]).unwrap()
        });
    }

    // reductions
    {
        let (c, t, f) = (3, 4, 5);
        let x = uniform_vec(rng, c * t * f, -2.0, 2.0);
        let p1 = uniform_vec(rng, c, -1.0, 1.0);
        n += fd_check("reduce/sum_tf", precision, h, tol, &x, &[c, t, f], &p1, &|tp, x| {
            tp.reduce(x, ReduceKind::Sum, &[1, 2]).unwrap()
        });
        let p2 = uniform_vec(rng, t * f, -1.0, 1.0);
        n += fd_check("reduce/mean_c", precision, h, tol, &x, &[c, t, f], &p2, &|tp, x| {
            tp.reduce(x, ReduceKind::Mean, &[0]).unwrap()
        });
        let p3 = uniform_vec(rng, 2 * c, -1.0, 1.0);
        n += fd_check(
            "reduce/mean_and_std",
            precision,
            h,
            tol,
            &x,
            &[c, t, f],
            &p3,
            &|tp, x| tp.reduce(x, ReduceKind::MeanAndStd, &[1, 2]).unwrap(),
        );
    }

    // affine: input / weight / bias
    {
        let (m, k) = (4, 6);
        let x = uniform_vec(rng, k, -1.5, 1.5);
        let w = uniform_vec(rng, m * k, -1.0, 1.0);
        let b = uniform_vec(rng, m, -0.5, 0.5);
        let probe = uniform_vec(rng, m, -1.0, 1.0);
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        n += fd_check("affine/input", precision, h, tol, &x, &[k], &probe, &|tp, x| {
            let w = tp.constant(wc.clone(), &[m, k]);
            let b = tp.constant(bc.clone(), &[m]);
            tp.affine(x, &w, &b).unwrap()
        });
        n += fd_check("affine/weight", precision, h, tol, &w, &[m, k], &probe, &|tp, w| {
            let x = tp.constant(xc.clone(), &[k]);
            let b = tp.constant(bc.clone(), &[m]);
            tp.affine(&x, w, &b).unwrap()
        });
        n += fd_check("affine/bias", precision, h, tol, &b, &[m], &probe, &|tp, b| {
            let x = tp.constant(xc.clone(), &[k]);
            let w = tp.constant(wc.clone(), &[m, k]);
            tp.affine(&x, &w, b).unwrap()
        });
    }

    // binary elementwise and weighted broadcasting
    {
        let (c, t, f) = (2, 3, 4);
        let m = c * t * f;
        let a = uniform_vec(rng, m, -1.5, 1.5);
        let b = uniform_vec(rng, m, -1.5, 1.5);
        let probe = uniform_vec(rng, m, -1.0, 1.0);
        let bc = b.clone();
        n += fd_check("add/lhs", precision, h, tol, &a, &[c, t, f], &probe, &|tp, x| {
            let y = tp.constant(bc.clone(), &[c, t, f]);
            tp.add(x, &y).unwrap()
        });
        n += fd_check("sub/rhs", precision, h, tol, &b, &[c, t, f], &probe, &|tp, y| {
            let x = tp.constant(a.clone(), &[c, t, f]);
            tp.sub(&x, y).unwrap()
        });
        n += fd_check("mul/lhs", precision, h, tol, &a, &[c, t, f], &probe, &|tp, x| {
            let y = tp.constant(bc.clone(), &[c, t, f]);
            tp.mul(x, &y).unwrap()
        });

        let wtf = uniform_vec(rng, t * f, -1.0, 1.0);
        let wch = uniform_vec(rng, c, -1.0, 1.0);
        let (wtfc, ac) = (wtf.clone(), a.clone());
        n += fd_check("mul_bcast_tf/x", precision, h, tol, &a, &[c, t, f], &probe, &|tp, x| {
            let w = tp.constant(wtfc.clone(), &[t, f]);
            tp.mul_bcast(x, &w, BcastDomain::TimeFreq).unwrap()
        });
        n += fd_check("mul_bcast_tf/w", precision, h, tol, &wtf, &[t, f], &probe, &|tp, w| {
            let x = tp.constant(ac.clone(), &[c, t, f]);
            tp.mul_bcast(&x, w, BcastDomain::TimeFreq).unwrap()
        });
        n += fd_check("mul_bcast_c/w", precision, h, tol, &wch, &[c], &probe, &|tp, w| {
            let x = tp.constant(ac.clone(), &[c, t, f]);
            tp.mul_bcast(&x, w, BcastDomain::Channel).unwrap()
        });

        let probe2 = uniform_vec(rng, 2 * m, -1.0, 1.0);
        n += fd_check("concat/lhs", precision, h, tol, &a, &[c, t, f], &probe2, &|tp, x| {
            let y = tp.constant(bc.clone(), &[c, t, f]);
            tp.concat_channels(x, &y).unwrap()
        });
        let probe_crop = uniform_vec(rng, c * 2 * 3, -1.0, 1.0);
        n += fd_check("crop", precision, h, tol, &a, &[c, t, f], &probe_crop, &|tp, x| {
            tp.crop_pad(x, 2, 3).unwrap()
        });
        let probe_pad = uniform_vec(rng, c * 5 * 6, -1.0, 1.0);
        n += fd_check("pad", precision, h, tol, &a, &[c, t, f], &probe_pad, &|tp, x| {
            tp.crop_pad(x, 5, 6).unwrap()
        });
    }

    // classifier head pieces
    {
        let k = 7;
        let z = uniform_vec(rng, k, -2.0, 2.0);
        let target = (inst as usize) % k;
        let probe = vec![1.0];
        n += fd_check("cross_entropy", precision, h, tol, &z, &[k], &probe, &|tp, z| {
            tp.cross_entropy(z, target).unwrap()
        });
        n += fd_check("select", precision, h, tol, &z, &[k], &probe, &|tp, z| {
            tp.select(z, target).unwrap()
        });
    }

    n
}

// ── Metric oracles ───────────────────────────────────────────────────

/// Seeded random score set with at least one target and one nontarget.
pub fn random_score_set(seed: u64, size: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = seeds::rng_tagged("score-set", &[seed]);
    loop {
        let scores: Vec<f64> = (0..size)
            .map(|_| {
                // mix of continuous scores and deliberate ties
                if rng.gen_bool(0.2) {
                    (rng.gen_range(-2i32..=2) as f64) / 4.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let labels: Vec<bool> = (0..size).map(|_| rng.gen_bool(0.4)).collect();
        let targets = labels.iter().filter(|&&l| l).count();
        if targets > 0 && targets < size {
            return (scores, labels);
        }
    }
}

/// O(n^2) brute-force sweep: rates counted directly at every midpoint
/// between consecutive distinct scores plus both endpoints; EER by linear
/// interpolation of the crossing, minDCF as the minimum normalized cost.
/// Independent of the incremental implementation under test.
pub fn brute_force_metrics(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> (f64, f64) {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut thresholds = Vec::with_capacity(distinct.len() + 2);
    thresholds.push(distinct[0] - 1.0); // accept all
    for w in distinct.windows(2) {
        thresholds.push((w[0] + w[1]) / 2.0);
    }
    thresholds.push(distinct[distinct.len() - 1]); // accept only the max tie group
    thresholds.push(distinct[distinct.len() - 1] + 1.0); // accept none

    let n_t = labels.iter().filter(|&&l| l).count() as f64;
    let n_n = labels.len() as f64 - n_t;
    let rates = |th: f64| -> (f64, f64) {
        let mut fa = 0.0;
        let mut miss = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= th {
                if !*l {
                    fa += 1.0;
                }
            } else if *l {
                miss += 1.0;
            }
        }
        (fa / n_n, miss / n_t)
    };

    // descending thresholds to mirror the sweep direction
    let mut points: Vec<(f64, f64)> = thresholds
        .iter()
        .rev()
        .map(|&th| rates(th))
        .collect();
    points.dedup_by(|a, b| a == b);

    let mut eer = f64::NAN;
    for w in points.windows(2) {
        let (far0, frr0) = w[0];
        let (far1, frr1) = w[1];
        if far1 >= frr1 {
            let num = frr0 - far0;
            let den = (far1 - far0) + (frr0 - frr1);
            let t = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 1.0 };
            eer = far0 + t * (far1 - far0);
            break;
        }
    }
    if eer.is_nan() {
        let last = points.last().unwrap();
        eer = last.0.max(last.1);
    }

    let mut min_cost = f64::INFINITY;
    for (far, frr) in &points {
        min_cost = min_cost.min(c_miss * p_target * frr + c_fa * (1.0 - p_target) * far);
    }
    let floor = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    (eer, min_cost / floor)
}
