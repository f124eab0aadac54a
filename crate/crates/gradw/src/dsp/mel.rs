//! Log-compressed mel filterbank features over Hann-windowed frames.
//!
//! Compression is log1p(mel power), not log(mel): features stay
//! nonnegative, so a multiplicative mask in [0, 1] is a monotone
//! attenuator.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

use super::{FeatureMap, MelConfig, Waveform};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, peak 1, on the HTK mel scale; each entry is
/// (first fft bin, weights).
fn build_filters(cfg: &MelConfig) -> Vec<(usize, Vec<f64>)> {
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = f64::from(cfg.sample_rate) / cfg.fft_size as f64;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let step = (hi - lo) / (cfg.mel_bins + 1) as f64;
    let edge = |i: usize| mel_to_hz(lo + step * i as f64);
    let mut filters = Vec::with_capacity(cfg.mel_bins);
    for k in 0..cfg.mel_bins {
        let (f_lo, f_center, f_hi) = (edge(k), edge(k + 1), edge(k + 2));
        let mut start = None;
        let mut weights = Vec::new();
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= f_lo || f >= f_hi {
                0.0
            } else if f <= f_center {
                (f - f_lo) / (f_center - f_lo)
            } else {
                (f_hi - f) / (f_hi - f_center)
            };
            if w > 0.0 {
                if start.is_none() {
                    start = Some(b);
                }
                weights.push(w);
            } else if start.is_some() {
                break;
            }
        }
        filters.push((start.unwrap_or(0), weights));
    }
    filters
}

/// Center frequencies (Hz) of the triangular filters; test support.
pub fn mel_filter_centers(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let step = (hi - lo) / (cfg.mel_bins + 1) as f64;
    (1..=cfg.mel_bins).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

pub fn mel_features(w: &Waveform, cfg: &MelConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::Audio(format!(
            "waveform sample rate {} does not match mel config {}",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    if w.len() < cfg.window {
        return Err(Error::Audio(format!(
            "waveform too short: {} samples < window {}",
            w.len(),
            cfg.window
        )));
    }
    let frames = 1 + (w.len() - cfg.window) / cfg.hop;
    let hann: Vec<f64> = (0..cfg.window)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / cfg.window as f64).cos())
        .collect();
    let filters = build_filters(cfg);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);

    let n_bins = cfg.fft_size / 2 + 1;
    let mut values = Vec::with_capacity(frames * cfg.mel_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    for t in 0..frames {
        let frame = &w.samples()[t * cfg.hop..t * cfg.hop + cfg.window];
        for (b, (s, h)) in frame.iter().zip(&hann).enumerate() {
            buf[b] = Complex::new(s * h, 0.0);
        }
        for b in buf[cfg.window..].iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
            *p = (c.re * c.re + c.im * c.im) / cfg.fft_size as f64;
        }
        for (start, weights) in &filters {
            let e: f64 = weights
                .iter()
                .zip(&power[*start..])
                .map(|(w, p)| w * p)
                .sum();
            values.push(e.ln_1p());
        }
    }
    Ok(FeatureMap::from_parts(
        values,
        frames,
        cfg.mel_bins,
        cfg.frame_shift_s(),
        cfg.clone(),
    ))
}
