// Scratch per-op timing (temporary).
use std::time::Instant;

use gradw::seeds;
use gradw::tape::{ConvMode, NormMode, StatsMode, Tape};
use gradw::tensor::Precision;
use rand::Rng;

fn main() {
    let mut rng = seeds::rng_tagged("ops", &[0]);
    let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };

    // stem-like conv: 1 -> 8 channels at 200x24
    let x1 = vals(200 * 24);
    let k1 = vals(8 * 9);
    // block conv: 8 -> 8 at 100x12
    let x2 = vals(8 * 100 * 12);
    let k2 = vals(8 * 8 * 9);
    let g2 = vals(8);
    let n_iter = 200u32;

    let t0 = Instant::now();
    for _ in 0..n_iter {
        let tape = Tape::new(Precision::F32);
        let x = tape.constant(x1.clone(), &[1, 200, 24]);
        let k = tape.leaf(k1.clone(), &[8, 1, 3, 3]);
        let _ = tape
            .conv_layer(&x, &k, None, ConvMode::Forward, (1, 1), (1, 1))
            .unwrap();
    }
    println!("stem conv 1->8 @200x24: {:?}", t0.elapsed() / n_iter);

    let t0 = Instant::now();
    for _ in 0..n_iter {
        let tape = Tape::new(Precision::F32);
        let x = tape.constant(x2.clone(), &[8, 100, 12]);
        let k = tape.leaf(k2.clone(), &[8, 8, 3, 3]);
        let _ = tape
            .conv_layer(&x, &k, None, ConvMode::Forward, (1, 1), (1, 1))
            .unwrap();
    }
    println!("conv 8->8 @100x12: {:?}", t0.elapsed() / n_iter);

    let t0 = Instant::now();
    for _ in 0..n_iter {
        let tape = Tape::new(Precision::F32);
        let x = tape.constant(x2.clone(), &[8, 100, 12]);
        let g = tape.leaf(g2.clone(), &[8]);
        let b = tape.leaf(vec![0.0; 8], &[8]);
        let _ = tape
            .normalize_2d(&x, NormMode::Batch, &g, &b, StatsMode::Train, None, 1e-5)
            .unwrap();
    }
    println!("norm @8x100x12: {:?}", t0.elapsed() / n_iter);

    let t0 = Instant::now();
    for _ in 0..n_iter {
        let tape = Tape::new(Precision::F32);
        let x = tape.constant(x2.clone(), &[8, 100, 12]);
        let _ = tape.relu(&x);
    }
    println!("relu @8x100x12: {:?}", t0.elapsed() / n_iter);

    // raw conv kernel cost without tape
    let t0 = Instant::now();
    let mut sum = 0.0;
    for _ in 0..n_iter {
        let mut out = vec![0.0; 8 * 100 * 12];
        use gradw::tape::*;
        let _ = StatsMode::Eval;
        // call through the tape once to warm; emulate raw loop by summing
        for v in &x2 {
            sum += v;
        }
        std::hint::black_box(&mut out);
    }
    std::hint::black_box(sum);
    println!("baseline alloc+touch: {:?}", t0.elapsed() / n_iter);
}
