//! Deterministic synthetic speech and noise. Each speaker id maps to a
//! fixed vocal signature (fundamental, harmonic profile, two formant-like
//! resonances); the utterance seed varies the pitch contour, amplitude
//! envelope and harmonic phases, so utterances of one speaker differ but
//! share the signature.

use std::str::FromStr;

use rand::Rng;

use crate::error::Error;
use crate::params::normal;
use crate::seeds;

use super::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Tonal,
    BabbleSource,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Tonal => "tonal",
            NoiseKind::BabbleSource => "babble_source",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "white" => Ok(NoiseKind::White),
            "tonal" => Ok(NoiseKind::Tonal),
            "babble_source" => Ok(NoiseKind::BabbleSource),
            other => Err(Error::Config(format!(
                "unknown noise kind `{other}` (valid: white, tonal, babble_source)"
            ))),
        }
    }
}

struct Signature {
    f0: f64,
    amps: Vec<f64>,
}

fn signature(speaker_id: u64, sample_rate: u32) -> Signature {
    let mut rng = seeds::rng_tagged("speaker-signature", &[speaker_id]);
    let f0 = 85.0 * (300.0f64 / 85.0).powf(rng.gen_range(0.0..1.0));
    let rolloff: f64 = rng.gen_range(0.55..0.95);
    let formant1 = (rng.gen_range(300.0..900.0), rng.gen_range(80.0..200.0), rng.gen_range(2.0..6.0));
    let formant2 = (
        rng.gen_range(1000.0..2600.0),
        rng.gen_range(100.0..250.0),
        rng.gen_range(2.0..6.0),
    );
    let nyquist = f64::from(sample_rate) / 2.0;
    let n_harm = ((nyquist * 0.95 / f0) as usize).clamp(3, 24);
    let amps = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0;
            let jitter: f64 = rng.gen_range(0.5..1.5);
            let g1 = formant1.2 * (-((f - formant1.0) / formant1.1).powi(2) / 2.0).exp();
            let g2 = formant2.2 * (-((f - formant2.0) / formant2.1).powi(2) / 2.0).exp();
            rolloff.powi(k as i32) * jitter * (1.0 + g1 + g2)
        })
        .collect();
    Signature { f0, amps }
}

/// Deterministic in (speaker_id, seed).
pub fn synth_utterance(speaker_id: u64, duration_s: f64, seed: u64, sample_rate: u32) -> Waveform {
    assert!(duration_s > 0.0, "duration must be positive");
    let sig = signature(speaker_id, sample_rate);
    let mut rng = seeds::rng_tagged("utterance", &[speaker_id, seed]);
    let n = (duration_s * f64::from(sample_rate)).round() as usize;
    let sr = f64::from(sample_rate);

    // seed-varying pitch contour and amplitude envelope
    let c1 = (rng.gen_range(0.5..2.5), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.02..0.05));
    let c2 = (rng.gen_range(0.5..2.5), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.01..0.03));
    let drift: f64 = rng.gen_range(-0.03..0.03);
    let am = (rng.gen_range(1.5..4.0), rng.gen_range(0.0..std::f64::consts::TAU));
    let phases: Vec<f64> = (0..sig.amps.len())
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let attack = (0.05 * sr) as usize;
    let release = (0.10 * sr) as usize;
    let mut samples = vec![0.0; n];
    let mut theta = 0.0f64;
    for (i, out) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let contour = 1.0
            + c1.2 * (std::f64::consts::TAU * c1.0 * t + c1.1).sin()
            + c2.2 * (std::f64::consts::TAU * c2.0 * t + c2.1).sin()
            + drift * (t / duration_s);
        theta += std::f64::consts::TAU * sig.f0 * contour / sr;
        let mut v = 0.0;
        for (k, (&a, &p)) in sig.amps.iter().zip(&phases).enumerate() {
            v += a * ((k + 1) as f64 * theta + p).sin();
        }
        let mut env = 1.0 + 0.25 * (std::f64::consts::TAU * am.0 * t + am.1).sin();
        if i < attack {
            env *= i as f64 / attack as f64;
        }
        if n - 1 - i < release {
            env *= (n - 1 - i) as f64 / release as f64;
        }
        *out = v * env;
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = 0.45 / peak;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    Waveform {
        samples,
        sample_rate,
    }
}

/// Deterministic in (kind, seed). White is seeded Gaussian; tonal is a sum
/// of three seeded sinusoids (music stand-in); babble_source synthesizes an
/// utterance from a speaker id outside the training range.
pub fn synth_noise(kind: NoiseKind, duration_s: f64, seed: u64, sample_rate: u32) -> Waveform {
    assert!(duration_s > 0.0, "duration must be positive");
    let n = (duration_s * f64::from(sample_rate)).round() as usize;
    match kind {
        NoiseKind::White => {
            let mut rng = seeds::rng_tagged("noise-white", &[seed]);
            let samples = (0..n)
                .map(|_| (0.15 * normal(&mut rng)).clamp(-0.999, 0.999))
                .collect();
            Waveform {
                samples,
                sample_rate,
            }
        }
        NoiseKind::Tonal => {
            let mut rng = seeds::rng_tagged("noise-tonal", &[seed]);
            let parts: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let freq = 100.0 * (4000.0f64 / 100.0).powf(rng.gen_range(0.0..1.0));
                    (
                        std::f64::consts::TAU * freq / f64::from(sample_rate),
                        rng.gen_range(0.4..1.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let mut samples = vec![0.0; n];
            for (i, out) in samples.iter_mut().enumerate() {
                *out = parts
                    .iter()
                    .map(|(w, a, p)| a * (w * i as f64 + p).sin())
                    .sum();
            }
            let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            let g = 0.45 / peak;
            for s in samples.iter_mut() {
                *s *= g;
            }
            Waveform {
                samples,
                sample_rate,
            }
        }
        NoiseKind::BabbleSource => {
            let mut rng = seeds::rng_tagged("noise-babble", &[seed]);
            let speaker = 100_000 + rng.gen_range(0u64..100_000);
            synth_utterance(speaker, duration_s, seed, sample_rate)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().min(b.len()) as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da.sqrt() * db.sqrt())
    }

    #[test]
    fn utterance_is_deterministic() {
        let a = synth_utterance(5, 0.5, 11, 16_000);
        let b = synth_utterance(5, 0.5, 11, 16_000);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn different_seeds_give_distinct_utterances() {
        let a = synth_utterance(5, 0.5, 11, 16_000);
        let b = synth_utterance(5, 0.5, 12, 16_000);
        assert!(correlation(a.samples(), b.samples()).abs() < 0.99);
    }

    #[test]
    fn white_noise_mean_near_zero() {
        let w = synth_noise(NoiseKind::White, 1.0, 3, 16_000);
        let mean = w.samples().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn noise_is_deterministic() {
        for kind in [NoiseKind::White, NoiseKind::Tonal, NoiseKind::BabbleSource] {
            let a = synth_noise(kind, 0.25, 42, 16_000);
            let b = synth_noise(kind, 0.25, 42, 16_000);
            assert_eq!(a.samples(), b.samples());
        }
    }

    #[test]
    fn tonal_noise_has_at_most_three_dominant_peaks() {
        let w = synth_noise(NoiseKind::Tonal, 1.0, 17, 16_000);
        // coarse DFT magnitude at 4 Hz resolution
        let n = 4096.min(w.len());
        let sr = 16_000.0;
        let mut dominant = 0;
        let mut mags = Vec::new();
        for k in 1..n / 2 {
            let wk = std::f64::consts::TAU * k as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, s) in w.samples()[..n].iter().enumerate() {
                re += s * (wk * i as f64).cos();
                im -= s * (wk * i as f64).sin();
            }
            mags.push((re * re + im * im).sqrt());
        }
        let max = mags.iter().cloned().fold(0.0f64, f64::max);
        // count local maxima above 30% of the global peak
        for i in 1..mags.len() - 1 {
            if mags[i] > 0.3 * max && mags[i] >= mags[i - 1] && mags[i] >= mags[i + 1] {
                // skip immediate neighbors of a counted peak
                if i >= 2 && mags[i - 1] > 0.3 * max && mags[i - 2] > mags[i - 1] {
                    continue;
                }
                dominant += 1;
            }
        }
        let _ = sr;
        assert!(dominant <= 3, "found {dominant} dominant peaks");
    }

    #[test]
    fn unknown_noise_kind_parse_error() {
        assert!("pink".parse::<NoiseKind>().is_err());
        assert_eq!("white".parse::<NoiseKind>().unwrap(), NoiseKind::White);
    }
}
