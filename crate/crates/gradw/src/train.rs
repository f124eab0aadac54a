//! Optimization loops: Adam with linear warmup, deterministic batch
//! construction (synthesis, SNR mixing, feature extraction, aligned
//! crops), per-epoch validation and checkpointing.
//!
//! Batch items run on independent tapes, in parallel; their gradients,
//! losses and batch-norm observations are folded in item order, so results
//! are bit-identical regardless of thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::dsp::{
    make_babble, mel_features, mix_at_snr, synth_noise, FeatureMap, MelConfig, NoiseKind,
    Waveform,
};
use crate::error::{Error, Result};
use crate::loss::{compose_loss, LossVariant};
use crate::nn::{apply_stats_events, StatsEvent, BN_MOMENTUM};
use crate::params::ParamSet;
use crate::seeds;
use crate::speaker::{SpeakerNet, SpeakerNetConfig, SPEAKER_SCOPE};
use crate::tape::{StatsMode, Tape};
use crate::unet::{enhance, UNet, UNET_SCOPE};

// ── Corpus ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: usize,
    pub waveform: Waveform,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub num_speakers: usize,
}

impl Corpus {
    pub fn speakers(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.utterances.iter().map(|u| u.speaker_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn validate_for_pretraining(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let speakers = self.speakers();
        if speakers.len() < 2 {
            return Err(Error::Corpus("corpus has a single speaker".into()));
        }
        for &s in &speakers {
            let n = self.utterances.iter().filter(|u| u.speaker_id == s).count();
            if n < 2 {
                return Err(Error::Corpus(format!(
                    "speaker {s} has {n} utterance(s); need at least 2"
                )));
            }
        }
        if let Some(max) = speakers.last() {
            if *max >= self.num_speakers {
                return Err(Error::Corpus(format!(
                    "speaker id {max} out of range for {} classes",
                    self.num_speakers
                )));
            }
        }
        Ok(())
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update over every parameter in the set.
/// Gradients are keyed by the unscoped parameter names.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr_effective: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.frozen() {
        return Err(Error::Frozen("adam_step on a frozen parameter set".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let names: Vec<String> = params.iter_params().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::UnknownParam(format!("missing gradient for `{name}`")))?;
        let p = params.param(&name)?;
        let n = p.len();
        if g.len() != n {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                axis: 0,
                expected: n,
                got: g.len(),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut new_values = p.values().to_vec();
        for i in 0..n {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            new_values[i] -= lr_effective * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
        params.set_param_values(&name, new_values)?;
    }
    Ok(())
}

/// Linear per-step ramp from lr/(warmup_epochs * steps_per_epoch) up to the
/// configured rate across the warmup epochs, constant afterwards.
pub fn lr_schedule(
    learning_rate: f64,
    warmup_epochs: usize,
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
) -> f64 {
    let total_warmup = warmup_epochs * steps_per_epoch;
    let global = epoch * steps_per_epoch + step_in_epoch;
    if global < total_warmup {
        learning_rate * (global + 1) as f64 / total_warmup as f64
    } else {
        learning_rate
    }
}

// ── Training log ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
            ));
        }
        out
    }

    /// Equality of everything except the wall-time column.
    pub fn content_eq(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }
}

// ── Mixture construction ─────────────────────────────────────────────

/// A clean/noisy training pair. When the mixture needed peak
/// normalization, the same gain has been applied to the clean side so the
/// pair stays aligned in level.
pub struct NoisyPair {
    pub clean: Waveform,
    pub noisy: Waveform,
}

/// Pre-synthesized babble sources (speaker ids outside the training
/// range), built once per run; items draw seeded subsets. Plays the role
/// of an on-disk speech pool without re-synthesizing per batch item.
pub struct NoiseBank {
    pub babble: Vec<Waveform>,
}

impl NoiseBank {
    pub fn new(seed: u64, duration_s: f64, sample_rate: u32, n_sources: usize) -> Self {
        let babble = (0..n_sources)
            .map(|i| {
                let s = seeds::mix(&[seeds::tag("noise-bank"), seed, i as u64]);
                synth_noise(NoiseKind::BabbleSource, duration_s, s, sample_rate)
            })
            .collect();
        NoiseBank { babble }
    }

    fn draw<'a>(&'a self, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<&'a Waveform> {
        (0..k)
            .map(|_| &self.babble[rng.gen_range(0..self.babble.len())])
            .collect()
    }
}

fn sum_with_peak_guard(clean: &Waveform, noise: &Waveform) -> Result<NoisyPair> {
    let mut samples: Vec<f64> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| c + n)
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if gain != 1.0 {
        for s in samples.iter_mut() {
            *s *= gain;
        }
    }
    Ok(NoisyPair {
        clean: clean.scaled(gain),
        noisy: Waveform::new(samples, clean.sample_rate())?,
    })
}

/// Corruption recipe used during enhancement training and for validation
/// pairs: a third each white noise, tonal noise (uniform SNR in the range)
/// and multi-source babble at per-source SNRs from the list.
pub fn corrupt_utterance(
    clean: &Waveform,
    rng: &mut rand_chacha::ChaCha8Rng,
    snr_range_db: (f64, f64),
    babble_snrs_db: &[f64],
    babble_sources: (usize, usize),
    bank: &NoiseBank,
) -> Result<NoisyPair> {
    let sr = clean.sample_rate();
    let dur = clean.duration_s();
    match rng.gen_range(0..3u8) {
        0 | 1 => {
            let kind = if rng.gen_bool(0.5) {
                NoiseKind::White
            } else {
                NoiseKind::Tonal
            };
            let snr = rng.gen_range(snr_range_db.0..=snr_range_db.1);
            let noise = synth_noise(kind, dur, rng.gen(), sr);
            let mix = mix_at_snr(clean, &noise, snr)?;
            Ok(NoisyPair {
                clean: clean.scaled(mix.peak_gain),
                noisy: mix.mixture,
            })
        }
        _ => {
            let k = rng.gen_range(babble_sources.0..=babble_sources.1);
            let sources: Vec<Waveform> =
                bank.draw(k, rng).into_iter().cloned().collect();
            let snrs: Vec<f64> = (0..k)
                .map(|_| babble_snrs_db[rng.gen_range(0..babble_snrs_db.len())])
                .collect();
            let babble = make_babble(&sources, &snrs, clean)?;
            sum_with_peak_guard(clean, &babble)
        }
    }
}

fn aligned_crop(
    clean: &FeatureMap,
    noisy: &FeatureMap,
    crop_frames: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(FeatureMap, FeatureMap)> {
    let frames = clean.frames().min(noisy.frames());
    let len = crop_frames.min(frames);
    let offset = if frames > len {
        rng.gen_range(0..=frames - len)
    } else {
        0
    };
    Ok((clean.crop(offset, len)?, noisy.crop(offset, len)?))
}

fn strip_scope(grads: IndexMap<String, Vec<f64>>, scope: &str) -> IndexMap<String, Vec<f64>> {
    let prefix = format!("{scope}.");
    grads
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v)))
        .collect()
}

fn fold_gradients(
    acc: &mut IndexMap<String, Vec<f64>>,
    item: IndexMap<String, Vec<f64>>,
) {
    if acc.is_empty() {
        *acc = item;
        return;
    }
    for (k, v) in item {
        let slot = acc.get_mut(&k).expect("gradient key sets must match");
        for (a, b) in slot.iter_mut().zip(&v) {
            *a += b;
        }
    }
}

// ── Speaker pretraining ──────────────────────────────────────────────

/// Augmentation mix for speaker pretraining: a clean share, a noise-or-
/// music share (white or tonal, 50/50) and a babble share.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub p_clean: f64,
    pub p_noise: f64,
    pub p_babble: f64,
    pub noise_snrs_db: Vec<f64>,
    pub babble_snrs_db: Vec<f64>,
    pub babble_sources: (usize, usize),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_clean: 0.4,
            p_noise: 0.3,
            p_babble: 0.3,
            noise_snrs_db: vec![0.0, 5.0, 10.0, 15.0],
            babble_snrs_db: vec![13.0, 15.0, 17.0, 20.0],
            babble_sources: (3, 7),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub crop_frames: usize,
    pub adam: AdamParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_epochs: 2,
            crop_frames: 200,
            adam: AdamParams::default(),
        }
    }
}

pub struct PretrainOutput {
    /// Frozen model with finalized running statistics.
    pub model: SpeakerNet,
    pub log: TrainLog,
    /// Eval-mode accuracy on the validation subset, one entry per epoch.
    pub epoch_accuracy: Vec<f64>,
    /// Final eval-mode accuracy over the whole (clean) corpus.
    pub train_accuracy: f64,
}

fn augmented_features(
    u: &Utterance,
    policy: &AugmentPolicy,
    mel: &MelConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    bank: &NoiseBank,
) -> Result<FeatureMap> {
    let choice: f64 = rng.gen();
    if choice < policy.p_clean {
        return mel_features(&u.waveform, mel);
    }
    if choice < policy.p_clean + policy.p_noise {
        let kind = if rng.gen_bool(0.5) {
            NoiseKind::White
        } else {
            NoiseKind::Tonal
        };
        let snr = policy.noise_snrs_db[rng.gen_range(0..policy.noise_snrs_db.len())];
        let noise = synth_noise(kind, u.waveform.duration_s(), rng.gen(), u.waveform.sample_rate());
        let mix = mix_at_snr(&u.waveform, &noise, snr)?;
        return mel_features(&mix.mixture, mel);
    }
    let k = rng.gen_range(policy.babble_sources.0..=policy.babble_sources.1);
    let sources: Vec<Waveform> = bank.draw(k, rng).into_iter().cloned().collect();
    let snrs: Vec<f64> = (0..k)
        .map(|_| policy.babble_snrs_db[rng.gen_range(0..policy.babble_snrs_db.len())])
        .collect();
    let babble = make_babble(&sources, &snrs, &u.waveform)?;
    let pair = sum_with_peak_guard(&u.waveform, &babble)?;
    mel_features(&pair.noisy, mel)
}

struct ItemResult {
    loss: f64,
    grads: IndexMap<String, Vec<f64>>,
    events: Vec<StatsEvent>,
}

fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Cross-entropy pretraining of the speaker classifier over the corpus
/// with the augmentation policy, followed by freezing. Deterministic in
/// (config, corpus, policy, seed): two runs produce identical parameters.
pub fn pretrain_speaker(
    config: &SpeakerNetConfig,
    corpus: &Corpus,
    policy: &AugmentPolicy,
    opts: &PretrainConfig,
    mel: &MelConfig,
    seed: u64,
    precision: crate::tensor::Precision,
) -> Result<PretrainOutput> {
    corpus.validate_for_pretraining()?;
    if config.num_speakers != corpus.num_speakers {
        return Err(Error::Corpus(format!(
            "model expects {} classes, corpus declares {}",
            config.num_speakers, corpus.num_speakers
        )));
    }
    let mut model = SpeakerNet::new(config.clone(), seed, precision)?;
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut epoch_accuracy = Vec::with_capacity(opts.epochs);
    let n = corpus.utterances.len();
    let steps_per_epoch = (n / opts.batch_size).max(1);
    let bank_dur = corpus.utterances[0].waveform.duration_s();
    let bank = NoiseBank::new(seed, bank_dur, corpus.utterances[0].waveform.sample_rate(), 24);

    // fixed validation subset: clean features, eval-mode cross-entropy
    let stride = n.div_ceil(32).max(1);
    let val_set: Vec<(FeatureMap, usize)> = corpus
        .utterances
        .iter()
        .step_by(stride)
        .map(|u| {
            let fm = mel_features(&u.waveform, mel)?;
            let len = opts.crop_frames.min(fm.frames());
            Ok((fm.crop(0, len)?, u.speaker_id))
        })
        .collect::<Result<_>>()?;

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let mut order_rng = seeds::rng_tagged("pretrain-order", &[seed, epoch as u64]);
        let order = shuffled_indices(n, &mut order_rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for step in 0..steps_per_epoch {
            let lr = lr_schedule(
                opts.learning_rate,
                opts.warmup_epochs,
                epoch,
                step,
                steps_per_epoch,
            );
            last_lr = lr;
            let items: Vec<usize> = (0..opts.batch_size)
                .map(|i| order[(step * opts.batch_size + i) % n])
                .collect();
            let results: Vec<ItemResult> = items
                .par_iter()
                .enumerate()
                .map(|(i, &utt_idx)| -> Result<ItemResult> {
                    let u = &corpus.utterances[utt_idx];
                    let mut rng = seeds::rng_tagged(
                        "pretrain-item",
                        &[seed, epoch as u64, step as u64, i as u64],
                    );
                    let fm = augmented_features(u, policy, mel, &mut rng, &bank)?;
                    let len = opts.crop_frames.min(fm.frames());
                    let offset = if fm.frames() > len {
                        rng.gen_range(0..=fm.frames() - len)
                    } else {
                        0
                    };
                    let fm = fm.crop(offset, len)?;
                    let tape = Tape::new(model.precision());
                    let trace = model.forward(&tape, &fm, StatsMode::Train, false)?;
                    let loss = tape.cross_entropy(&trace.logits, u.speaker_id)?;
                    let back = tape.backward_to(&loss, &[])?;
                    Ok(ItemResult {
                        loss: loss.item(),
                        grads: strip_scope(back.param_grads, SPEAKER_SCOPE),
                        events: trace.stats_events,
                    })
                })
                .collect::<Result<_>>()?;

            let mut grads = IndexMap::new();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
            }
            for r in results {
                apply_stats_events(&mut model.params, &r.events, BN_MOMENTUM)?;
                fold_gradients(&mut grads, r.grads);
            }
            let scale = 1.0 / opts.batch_size as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            adam_step(&mut model.params, &grads, &mut state, lr, &opts.adam)?;
            epoch_loss += batch_loss * scale;
        }

        let mut val_loss = 0.0;
        let mut val_correct = 0usize;
        for (fm, target) in &val_set {
            let tape = Tape::new(model.precision());
            let trace = model.forward(&tape, fm, StatsMode::Eval, false)?;
            let l = tape.cross_entropy(&trace.logits, *target)?;
            val_loss += l.item();
            let argmax = trace
                .logits
                .values()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            val_correct += usize::from(argmax == *target);
        }
        epoch_accuracy.push(val_correct as f64 / val_set.len() as f64);
        log.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss: val_loss / val_set.len() as f64,
            lr: last_lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    // final train-set accuracy on clean features
    let correct: usize = corpus
        .utterances
        .par_iter()
        .map(|u| -> Result<usize> {
            let fm = mel_features(&u.waveform, mel)?;
            Ok(usize::from(model.classify(&fm)? == u.speaker_id))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    let train_accuracy = correct as f64 / n as f64;

    model.freeze();
    Ok(PretrainOutput {
        model,
        log,
        epoch_accuracy,
        train_accuracy,
    })
}

// ── Enhancement training ─────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub variant: LossVariant,
    pub crop_frames: usize,
    pub snr_range_db: (f64, f64),
    pub babble_snrs_db: Vec<f64>,
    pub babble_sources: (usize, usize),
    pub holdout_speakers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            warmup_epochs: 5,
            epochs: 10,
            batch_size: 8,
            adam: AdamParams::default(),
            seed: 0,
            variant: LossVariant::GradW,
            crop_frames: 200,
            snr_range_db: (-10.0, 0.0),
            babble_snrs_db: vec![5.0, 8.0, 10.0, 13.0, 15.0],
            babble_sources: (5, 8),
            holdout_speakers: 2,
        }
    }
}

pub struct TrainOutput {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub epoch_checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Trains the masking network against the frozen speaker model. Per step:
/// sample clean utterances, synthesize noise, mix at a seeded SNR in the
/// configured range, extract features, crop clean and noisy features at
/// the same seeded offset, estimate the mask, enhance, compose the
/// selected loss variant, and update the U-Net with Adam. Checkpoints are
/// written per epoch; the best-validation epoch is retained separately.
pub fn train_enhancer(
    unet: &mut UNet,
    frozen_speaker: &SpeakerNet,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mel: &MelConfig,
    checkpoint_dir: Option<&Path>,
    tag: &str,
) -> Result<TrainOutput> {
    if !frozen_speaker.frozen() {
        return Err(Error::InvalidArgument {
            op: "train_enhancer",
            msg: "speaker model must be frozen with finalized running stats".into(),
        });
    }
    if corpus.utterances.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    let speakers = corpus.speakers();
    if *speakers.last().unwrap() >= frozen_speaker.config.num_speakers {
        return Err(Error::Corpus(format!(
            "corpus speaker {} outside the speaker model's {} classes",
            speakers.last().unwrap(),
            frozen_speaker.config.num_speakers
        )));
    }
    if cfg.holdout_speakers >= speakers.len() {
        return Err(Error::Corpus(format!(
            "cannot hold out {} of {} speakers",
            cfg.holdout_speakers,
            speakers.len()
        )));
    }

    // seeded speaker-level holdout for validation
    let mut holdout_rng = seeds::rng_tagged("enh-holdout", &[cfg.seed]);
    let shuffled = shuffled_indices(speakers.len(), &mut holdout_rng);
    let val_speakers: Vec<usize> = shuffled[speakers.len() - cfg.holdout_speakers..]
        .iter()
        .map(|&i| speakers[i])
        .collect();
    let train_utts: Vec<usize> = (0..corpus.utterances.len())
        .filter(|&i| !val_speakers.contains(&corpus.utterances[i].speaker_id))
        .collect();
    let val_utts: Vec<usize> = (0..corpus.utterances.len())
        .filter(|&i| val_speakers.contains(&corpus.utterances[i].speaker_id))
        .collect();
    if train_utts.is_empty() {
        return Err(Error::Corpus("no training utterances after holdout".into()));
    }

    let bank_dur = corpus.utterances[0].waveform.duration_s();
    let bank = NoiseBank::new(
        cfg.seed,
        bank_dur,
        corpus.utterances[0].waveform.sample_rate(),
        24,
    );

    // fixed validation pairs (clean, noisy, speaker), eval-mode equal_w loss
    let val_pairs: Vec<(FeatureMap, FeatureMap, usize)> = val_utts
        .iter()
        .take(16)
        .enumerate()
        .map(|(j, &i)| {
            let u = &corpus.utterances[i];
            let mut rng = seeds::rng_tagged("enh-val", &[cfg.seed, j as u64]);
            let pair = corrupt_utterance(
                &u.waveform,
                &mut rng,
                cfg.snr_range_db,
                &cfg.babble_snrs_db,
                cfg.babble_sources,
                &bank,
            )?;
            let clean = mel_features(&pair.clean, mel)?;
            let noisy = mel_features(&pair.noisy, mel)?;
            let len = cfg.crop_frames.min(clean.frames());
            Ok((
                clean.crop(0, len)?,
                noisy.crop(0, len)?,
                u.speaker_id,
            ))
        })
        .collect::<Result<_>>()?;

    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut epoch_checkpoints = Vec::new();
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    let n = train_utts.len();
    let steps_per_epoch = (n / cfg.batch_size).max(1);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order_rng = seeds::rng_tagged("enh-order", &[cfg.seed, epoch as u64]);
        let order = shuffled_indices(n, &mut order_rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for step in 0..steps_per_epoch {
            let lr = lr_schedule(
                cfg.learning_rate,
                cfg.warmup_epochs,
                epoch,
                step,
                steps_per_epoch,
            );
            last_lr = lr;
            let items: Vec<usize> = (0..cfg.batch_size)
                .map(|i| train_utts[order[(step * cfg.batch_size + i) % n]])
                .collect();
            let results: Vec<ItemResult> = items
                .par_iter()
                .enumerate()
                .map(|(i, &utt_idx)| -> Result<ItemResult> {
                    let u = &corpus.utterances[utt_idx];
                    let mut rng = seeds::rng_tagged(
                        "enh-item",
                        &[cfg.seed, epoch as u64, step as u64, i as u64],
                    );
                    let pair = corrupt_utterance(
                        &u.waveform,
                        &mut rng,
                        cfg.snr_range_db,
                        &cfg.babble_snrs_db,
                        cfg.babble_sources,
                        &bank,
                    )?;
                    let clean = mel_features(&pair.clean, mel)?;
                    let noisy = mel_features(&pair.noisy, mel)?;
                    let (clean, noisy) = aligned_crop(&clean, &noisy, cfg.crop_frames, &mut rng)?;
                    let tape = Tape::new(unet.precision());
                    let est = unet.estimate_mask(&tape, &noisy, StatsMode::Train)?;
                    let enhanced = enhance(&tape, &noisy, &est.mask)?;
                    let out = compose_loss(
                        &tape,
                        frozen_speaker,
                        &clean,
                        &enhanced,
                        u.speaker_id,
                        cfg.variant,
                    )?;
                    let loss_val = out.loss.item();
                    if !loss_val.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            step,
                            dump: format!(
                                "utterance {} (speaker {}), variant {}, loss {loss_val}",
                                u.id, u.speaker_id, cfg.variant
                            ),
                        });
                    }
                    let back = tape.backward_to(&out.loss, &[])?;
                    Ok(ItemResult {
                        loss: loss_val,
                        grads: strip_scope(back.param_grads, UNET_SCOPE),
                        events: est.stats_events,
                    })
                })
                .collect::<Result<_>>()?;

            let mut grads = IndexMap::new();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
            }
            for r in results {
                apply_stats_events(&mut unet.params, &r.events, BN_MOMENTUM)?;
                fold_gradients(&mut grads, r.grads);
            }
            let scale = 1.0 / cfg.batch_size as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            adam_step(&mut unet.params, &grads, &mut state, lr, &cfg.adam)?;
            epoch_loss += batch_loss * scale;
        }

        // variant-independent validation: eval-mode equal_w loss
        let val_loss: f64 = val_pairs
            .par_iter()
            .map(|(clean, noisy, speaker)| -> Result<f64> {
                let tape = Tape::new(unet.precision());
                let est = unet.estimate_mask(&tape, noisy, StatsMode::Eval)?;
                let enhanced = enhance(&tape, noisy, &est.mask)?;
                let out = compose_loss(
                    &tape,
                    frozen_speaker,
                    clean,
                    &enhanced,
                    *speaker,
                    LossVariant::EqualW,
                )?;
                Ok(out.loss.item())
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .sum::<f64>()
            / val_pairs.len().max(1) as f64;

        log.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            lr: last_lr,
            seconds: started.elapsed().as_secs_f64(),
        });

        let bytes = checkpoint::encode(&unet.to_checkpoint());
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("{tag}_epoch{epoch:02}.ckpt"));
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            epoch_checkpoints.push(path);
        }
        let better = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if better {
            best = Some((epoch, val_loss, bytes));
        }
    }

    let (best_epoch, _, best_bytes) = best.expect("at least one epoch");
    let best_checkpoint = if let Some(dir) = checkpoint_dir {
        let path = dir.join(format!("{tag}_best.ckpt"));
        std::fs::write(&path, &best_bytes).map_err(|e| Error::io(&path, e))?;
        Some(path)
    } else {
        None
    };
    Ok(TrainOutput {
        log,
        best_epoch,
        epoch_checkpoints,
        best_checkpoint,
    })
}
