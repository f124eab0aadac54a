//! Finite-difference verification of every tape primitive, plus the
//! composition and determinism contracts of the backward pass.

mod common;

use gradw::seeds;
use gradw::tape::{ConvMode, NormMode, PointwiseKind, ReduceKind, StatsMode, Tape};
use gradw::tensor::{Precision, Tensor};

#[test]
fn primitives_match_central_differences_f64() {
    let checked = common::fd_check_primitives(Precision::F64, 1e-5, 1e-6, 20);
    assert!(checked > 10_000, "only {checked} gradient elements checked");
}

#[test]
fn primitives_match_central_differences_f32_storage() {
    // storage rounding adds noise; wider step, looser tolerance
    let checked = common::fd_check_primitives(Precision::F32, 1e-3, 1e-3, 20);
    assert!(checked > 10_000);
}

/// A small composed network: conv -> instance norm -> relu -> strided conv
/// -> pooled stats -> affine -> selected logit. Checked against central
/// differences with respect to the input features.
#[test]
fn composed_network_matches_central_differences() {
    for inst in 0..6u64 {
        let mut rng = seeds::rng_tagged("fd-composed", &[inst]);
        let (c, t, f) = (1, 8, 8);
        let x0 = common::uniform_vec(&mut rng, c * t * f, -1.0, 1.0);
        let k1 = common::uniform_vec(&mut rng, 4 * c * 9, -0.6, 0.6);
        let g1 = common::uniform_vec(&mut rng, 4, 0.8, 1.2);
        let b1 = common::uniform_vec(&mut rng, 4, -0.2, 0.2);
        let k2 = common::uniform_vec(&mut rng, 8 * 4 * 9, -0.4, 0.4);
        let w = common::uniform_vec(&mut rng, 3 * 16, -0.5, 0.5);
        let bw = common::uniform_vec(&mut rng, 3, -0.2, 0.2);

        let build = move |tp: &Tape, x: &Tensor| -> Tensor {
            let k1t = tp.constant(k1.clone(), &[4, c, 3, 3]);
            let h1 = tp
                .conv_layer(x, &k1t, None, ConvMode::Forward, (1, 1), (1, 1))
                .unwrap();
            let g1t = tp.constant(g1.clone(), &[4]);
            let b1t = tp.constant(b1.clone(), &[4]);
            let (h1n, _) = tp
                .normalize_2d(&h1, NormMode::Instance, &g1t, &b1t, StatsMode::Eval, None, 1e-5)
                .unwrap();
            let h1r = tp.pointwise(&h1n, PointwiseKind::Relu);
            let k2t = tp.constant(k2.clone(), &[8, 4, 3, 3]);
            let h2 = tp
                .conv_layer(&h1r, &k2t, None, ConvMode::Forward, (2, 2), (1, 1))
                .unwrap();
            let pooled = tp.reduce(&h2, ReduceKind::MeanAndStd, &[1, 2]).unwrap();
            let wt = tp.constant(w.clone(), &[3, 16]);
            let bt = tp.constant(bw.clone(), &[3]);
            let logits = tp.affine(&pooled, &wt, &bt).unwrap();
            tp.select(&logits, 1).unwrap()
        };

        common::fd_check(
            "composed",
            Precision::F64,
            1e-5,
            1e-6,
            &x0,
            &[c, t, f],
            &[1.0],
            &build,
        );
    }
}

#[test]
fn two_backward_passes_are_bit_identical() {
    let tape = Tape::new(Precision::F64);
    let mut rng = seeds::rng_tagged("det", &[7]);
    let x0 = common::uniform_vec(&mut rng, 36, -1.0, 1.0);
    let x = tape.leaf(x0, &[1, 6, 6]);
    tape.mark_tap(&x).unwrap();
    let k = tape.constant(common::uniform_vec(&mut rng, 9, -1.0, 1.0), &[1, 1, 3, 3]);
    let y = tape
        .conv_layer(&x, &k, None, ConvMode::Forward, (1, 1), (1, 1))
        .unwrap();
    let yr = tape.pointwise(&y, PointwiseKind::Sigmoid);
    let s = tape.sum_all(&yr).unwrap();
    let a = tape.backward_to(&s, &[&x]).unwrap();
    let b = tape.backward_to(&s, &[&x]).unwrap();
    assert_eq!(a.tap_grads[0].values.len(), b.tap_grads[0].values.len());
    for (u, v) in a.tap_grads[0].values.iter().zip(&b.tap_grads[0].values) {
        assert_eq!(u.to_bits(), v.to_bits());
    }
}
