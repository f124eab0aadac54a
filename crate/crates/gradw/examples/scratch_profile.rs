// Scratch micro-profile (temporary).
use std::time::Instant;

use gradw::dsp::{mel_features, synth_utterance, MelConfig};
use gradw::speaker::{SpeakerNet, SpeakerNetConfig};
use gradw::tape::{StatsMode, Tape};
use gradw::tensor::Precision;

fn main() {
    let mel = MelConfig::default();
    let w = synth_utterance(0, 2.5, 0, 16_000);
    let t0 = Instant::now();
    let fm = mel_features(&w, &mel).unwrap().crop(0, 200).unwrap();
    println!("mel: {:?}", t0.elapsed());

    let net = SpeakerNet::new(SpeakerNetConfig::default(), 0, Precision::F32).unwrap();
    // warm up
    for _ in 0..2 {
        let tape = Tape::new(Precision::F32);
        let tr = net.forward(&tape, &fm, StatsMode::Train, false).unwrap();
        let l = tape.cross_entropy(&tr.logits, 0).unwrap();
        tape.backward_to(&l, &[]).unwrap();
    }
    let n = 20;
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new(Precision::F32);
        let _ = net.forward(&tape, &fm, StatsMode::Train, false).unwrap();
    }
    println!("forward only: {:?}/iter", t0.elapsed() / n);

    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new(Precision::F32);
        let tr = net.forward(&tape, &fm, StatsMode::Train, false).unwrap();
        let l = tape.cross_entropy(&tr.logits, 0).unwrap();
        tape.backward_to(&l, &[]).unwrap();
    }
    println!("forward+backward: {:?}/iter", t0.elapsed() / n);

    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new(Precision::F32);
        let _ = net.forward(&tape, &fm, StatsMode::Eval, false).unwrap();
    }
    println!("eval forward: {:?}/iter", t0.elapsed() / n);
}
