//! Waveform synthesis, mel-domain feature extraction and SNR-exact
//! noisy-mixture construction. Everything here is a pure function of its
//! arguments; corpora and mixtures are bit-reproducible from seeds.

mod mel;
mod synth;
mod wav;

pub use mel::{mel_features, mel_filter_centers};
pub use synth::{synth_noise, synth_utterance, NoiseKind};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Mono waveform, samples nominally in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("waveform must be nonempty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Uniform gain, returning a new waveform.
    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Mel filterbank configuration. The paper-side parameters are unstated,
/// so these are declared toolkit defaults; everything is configurable.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples.
    pub window: usize,
    /// Hop between frames in samples.
    pub hop: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            fft_size: 512,
            mel_bins: 24,
            f_min: 40.0,
            f_max: 7600.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mel_bins < 2 {
            return Err(Error::Config("mel_bins must be >= 2".into()));
        }
        if !(self.f_min < self.f_max && self.f_max <= f64::from(self.sample_rate) / 2.0) {
            return Err(Error::Config(format!(
                "need f_min < f_max <= sample_rate/2, got f_min={}, f_max={}, sr={}",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        if self.window == 0 || self.hop == 0 || self.fft_size < self.window {
            return Err(Error::Config(
                "window and hop must be positive and fft_size >= window".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.hop as f64 / f64::from(self.sample_rate)
    }
}

/// Nonnegative time x frequency feature matrix (log1p-compressed mel
/// power), row-major `[t][f]`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    values: Vec<f64>,
    frames: usize,
    bins: usize,
    frame_shift: f64,
    mel: MelConfig,
}

impl FeatureMap {
    pub(crate) fn from_parts(
        values: Vec<f64>,
        frames: usize,
        bins: usize,
        frame_shift: f64,
        mel: MelConfig,
    ) -> Self {
        debug_assert_eq!(values.len(), frames * bins);
        FeatureMap {
            values,
            frames,
            bins,
            frame_shift,
            mel,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.frame_shift
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bins + f]
    }

    /// Contiguous frame range `[offset, offset + len)`.
    pub fn crop(&self, offset: usize, len: usize) -> Result<FeatureMap> {
        if offset + len > self.frames {
            return Err(Error::InvalidArgument {
                op: "FeatureMap::crop",
                msg: format!(
                    "crop [{offset}, {}) out of range for {} frames",
                    offset + len,
                    self.frames
                ),
            });
        }
        Ok(FeatureMap {
            values: self.values[offset * self.bins..(offset + len) * self.bins].to_vec(),
            frames: len,
            bins: self.bins,
            frame_shift: self.frame_shift,
            mel: self.mel.clone(),
        })
    }

    /// CSV with one row per frame and one column per mel bin.
    pub fn to_csv(&self) -> String {
        grid_to_csv(&self.values, self.frames, self.bins)
    }
}

/// Shared CSV formatter: '.' decimal separator, LF line endings.
pub fn grid_to_csv(values: &[f64], rows: usize, cols: usize) -> String {
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.9e}", values[r * cols + c]));
        }
        out.push('\n');
    }
    out
}

// ── SNR mixing ───────────────────────────────────────────────────────

pub fn power(samples: &[f64]) -> f64 {
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// 10 log10(P_signal / P_noise) in dB.
pub fn measure_snr_db(signal: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (power(signal.samples()) / power(noise.samples())).log10()
}

/// Wraparound-loops a short waveform, then takes a seeded random crop when
/// it is longer than `len`.
pub fn fit_to_length(w: &Waveform, len: usize, seed: u64) -> Waveform {
    use rand::Rng;
    let mut samples = Vec::with_capacity(len.max(w.len()));
    while samples.len() < len {
        samples.extend_from_slice(w.samples());
    }
    if samples.len() > len {
        let slack = samples.len() - len;
        let offset = if w.len() > len {
            crate::seeds::rng_tagged("fit-crop", &[seed]).gen_range(0..=slack)
        } else {
            0
        };
        samples = samples[offset..offset + len].to_vec();
    }
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

fn fit_deterministic(w: &Waveform, len: usize) -> Waveform {
    let mut samples = Vec::with_capacity(len);
    while samples.len() < len {
        let take = (len - samples.len()).min(w.len());
        samples.extend_from_slice(&w.samples()[..take]);
    }
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Result of an SNR-exact mix. `noise_scale` is the gain applied to the
/// noise to hit the requested SNR; `peak_gain` is the uniform gain applied
/// to the whole mixture afterwards to keep samples in [-1, 1] (1.0 when no
/// normalization was needed). Scaling the pair by `peak_gain` preserves
/// the SNR, so callers pairing clean references with mixtures should apply
/// the same gain to the clean side.
#[derive(Clone, Debug)]
pub struct Mix {
    pub mixture: Waveform,
    pub noise_scale: f64,
    pub peak_gain: f64,
}

/// Mixes `clean + alpha * noise` with alpha chosen so the measured SNR of
/// the returned pair equals `snr_db` exactly. Noise is looped or cropped
/// (from the start) to the clean length first; use [`fit_to_length`] for a
/// seeded random crop.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mix> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::Audio(format!(
            "sample rate mismatch: {} vs {}",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    let noise = fit_deterministic(noise, clean.len());
    let p_clean = power(clean.samples());
    let p_noise = power(noise.samples());
    if p_clean <= 0.0 {
        return Err(Error::Audio("zero-power clean input".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::Audio("zero-power noise input".into()));
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut samples: Vec<f64> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| c + alpha * n)
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let peak_gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if peak_gain != 1.0 {
        for s in samples.iter_mut() {
            *s *= peak_gain;
        }
    }
    Ok(Mix {
        mixture: Waveform {
            samples,
            sample_rate: clean.sample_rate(),
        },
        noise_scale: alpha,
        peak_gain,
    })
}

/// Sums the sources, each scaled to its per-source SNR relative to the
/// reference. The training recipes draw 3-7 or 5-8 sources; anything in
/// [1, 8] is accepted so a single source reduces to `mix_at_snr`'s noise
/// term.
pub fn make_babble(
    sources: &[Waveform],
    per_source_snr_db: &[f64],
    reference: &Waveform,
) -> Result<Waveform> {
    if sources.is_empty() || sources.len() > 8 {
        return Err(Error::Audio(format!(
            "babble needs 1..=8 sources, got {}",
            sources.len()
        )));
    }
    if sources.len() != per_source_snr_db.len() {
        return Err(Error::Audio(format!(
            "source/SNR list length mismatch: {} vs {}",
            sources.len(),
            per_source_snr_db.len()
        )));
    }
    let p_ref = power(reference.samples());
    if p_ref <= 0.0 {
        return Err(Error::Audio("zero-power reference".into()));
    }
    let mut acc = vec![0.0; reference.len()];
    for (src, &snr) in sources.iter().zip(per_source_snr_db) {
        if src.sample_rate() != reference.sample_rate() {
            return Err(Error::Audio("babble source sample rate mismatch".into()));
        }
        let fitted = fit_deterministic(src, reference.len());
        let p_src = power(fitted.samples());
        if p_src <= 0.0 {
            return Err(Error::Audio("zero-power babble source".into()));
        }
        let alpha = (p_ref / (p_src * 10f64.powf(snr / 10.0))).sqrt();
        for (a, s) in acc.iter_mut().zip(fitted.samples()) {
            *a += alpha * s;
        }
    }
    Ok(Waveform {
        samples: acc,
        sample_rate: reference.sample_rate(),
    })
}
