//! Sectioned plain-text experiment configuration.
//!
//! The format is `[section]` headers over `key = value` lines with `#`
//! comments. Unknown sections and keys are rejected. Serialization writes
//! every key in a canonical order, and the serialized text reparses to an
//! equal configuration, which is how each run embeds its resolved
//! configuration next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::dsp::{MelConfig, NoiseKind};
use crate::error::{Error, Result};
use crate::loss::LossVariant;
use crate::metrics::Condition;
use crate::speaker::SpeakerNetConfig;
use crate::tensor::Precision;
use crate::train::{AugmentPolicy, PretrainConfig, TrainConfig};
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    pub noise_clips: usize,
    pub noise_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSection {
    pub first_conv_channels: usize,
    pub block_depths: [usize; 4],
    pub embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnetSection {
    pub first_conv_channels: usize,
    pub encoder_depths: [usize; 4],
    pub decoder_depths: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub n_trials: usize,
    pub noise_kind: NoiseKind,
    pub snr_list: Vec<Condition>,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub mel: MelConfig,
    pub speaker: SpeakerSection,
    pub pretrain: PretrainConfig,
    pub unet: UnetSection,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunSection {
                seed: 0,
                precision: Precision::F32,
            },
            data: DataSection {
                num_speakers: 8,
                utterances_per_speaker: 20,
                utterance_seconds: 2.5,
                noise_clips: 40,
                noise_seconds: 3.0,
            },
            mel: MelConfig::default(),
            speaker: SpeakerSection {
                first_conv_channels: 8,
                block_depths: [2, 2, 2, 2],
                embedding_dim: 32,
            },
            pretrain: PretrainConfig::default(),
            unet: UnetSection {
                first_conv_channels: 8,
                encoder_depths: [2, 2, 2, 2],
                decoder_depths: [2, 2, 2],
            },
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            eval: EvalSection {
                n_trials: 200,
                noise_kind: NoiseKind::White,
                snr_list: vec![
                    Condition::Snr(-10.0),
                    Condition::Snr(-5.0),
                    Condition::Snr(0.0),
                ],
                p_target: 0.01,
                c_miss: 1.0,
                c_fa: 1.0,
            },
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn speaker_net_config(&self) -> SpeakerNetConfig {
        SpeakerNetConfig {
            first_conv_channels: self.speaker.first_conv_channels,
            block_depths: self.speaker.block_depths,
            embedding_dim: self.speaker.embedding_dim,
            num_speakers: self.data.num_speakers,
            mel_bins: self.mel.mel_bins,
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            first_conv_channels: self.unet.first_conv_channels,
            encoder_depths: self.unet.encoder_depths,
            decoder_depths: self.unet.decoder_depths,
            mel_bins: self.mel.mel_bins,
        }
    }

    /// Train config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.run.seed,
            ..self.train.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let precision = match self.run.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let _ = write!(
            s,
            "[run]\nseed = {}\nprecision = {}\n\n",
            self.run.seed, precision
        );
        let d = &self.data;
        let _ = write!(
            s,
            "[data]\nnum_speakers = {}\nutterances_per_speaker = {}\nutterance_seconds = {}\nnoise_clips = {}\nnoise_seconds = {}\n\n",
            d.num_speakers, d.utterances_per_speaker, d.utterance_seconds, d.noise_clips, d.noise_seconds
        );
        let m = &self.mel;
        let _ = write!(
            s,
            "[mel]\nsample_rate = {}\nwindow = {}\nhop = {}\nfft_size = {}\nmel_bins = {}\nf_min = {}\nf_max = {}\n\n",
            m.sample_rate, m.window, m.hop, m.fft_size, m.mel_bins, m.f_min, m.f_max
        );
        let sp = &self.speaker;
        let _ = write!(
            s,
            "[speaker]\nfirst_conv_channels = {}\nblock_depths = {}\nembedding_dim = {}\n\n",
            sp.first_conv_channels,
            join(&sp.block_depths),
            sp.embedding_dim
        );
        let p = &self.pretrain;
        let _ = write!(
            s,
            "[pretrain]\nepochs = {}\nbatch_size = {}\nlearning_rate = {}\nwarmup_epochs = {}\ncrop_frames = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_epsilon = {}\n\n",
            p.epochs, p.batch_size, p.learning_rate, p.warmup_epochs, p.crop_frames,
            p.adam.beta1, p.adam.beta2, p.adam.epsilon
        );
        let u = &self.unet;
        let _ = write!(
            s,
            "[unet]\nfirst_conv_channels = {}\nencoder_depths = {}\ndecoder_depths = {}\n\n",
            u.first_conv_channels,
            join(&u.encoder_depths),
            join(&u.decoder_depths)
        );
        let t = &self.train;
        let _ = write!(
            s,
            "[train]\nlearning_rate = {}\nwarmup_epochs = {}\nepochs = {}\nbatch_size = {}\nvariant = {}\ncrop_frames = {}\nsnr_low = {}\nsnr_high = {}\nbabble_snrs = {}\nbabble_min_sources = {}\nbabble_max_sources = {}\nholdout_speakers = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_epsilon = {}\n\n",
            t.learning_rate, t.warmup_epochs, t.epochs, t.batch_size, t.variant, t.crop_frames,
            t.snr_range_db.0, t.snr_range_db.1, join(&t.babble_snrs_db),
            t.babble_sources.0, t.babble_sources.1, t.holdout_speakers,
            t.adam.beta1, t.adam.beta2, t.adam.epsilon
        );
        let a = &self.augment;
        let _ = write!(
            s,
            "[augment]\np_clean = {}\np_noise = {}\np_babble = {}\nnoise_snrs = {}\nbabble_snrs = {}\nbabble_min_sources = {}\nbabble_max_sources = {}\n\n",
            a.p_clean, a.p_noise, a.p_babble, join(&a.noise_snrs_db), join(&a.babble_snrs_db),
            a.babble_sources.0, a.babble_sources.1
        );
        let e = &self.eval;
        let snr_list: Vec<String> = e.snr_list.iter().map(ToString::to_string).collect();
        let _ = write!(
            s,
            "[eval]\nn_trials = {}\nnoise_kind = {}\nsnr_list = {}\np_target = {}\nc_miss = {}\nc_fa = {}\n",
            e.n_trials,
            e.noise_kind.name(),
            snr_list.join(","),
            e.p_target,
            e.c_miss,
            e.c_fa
        );
        s
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                if !matches!(
                    section.as_str(),
                    "run" | "data" | "mel" | "speaker" | "pretrain" | "unet" | "train"
                        | "augment" | "eval"
                ) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        ln + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", ln + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.train.learning_rate <= 0.0 || self.pretrain.learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.train.warmup_epochs > self.train.epochs {
            return Err(Error::Config(
                "train warmup_epochs must not exceed epochs".into(),
            ));
        }
        let a = &self.augment;
        if (a.p_clean + a.p_noise + a.p_babble - 1.0).abs() > 1e-9 {
            return Err(Error::Config("augment shares must sum to 1".into()));
        }
        if self.data.utterance_seconds <= 0.0 || self.data.noise_seconds <= 0.0 {
            return Err(Error::Config("durations must be positive".into()));
        }
        Ok(())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad list entry in {key}: `{s}`")))
                })
                .collect()
        }
        fn fixed<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
            let v: Vec<usize> = list(key, value)?;
            v.try_into()
                .map_err(|_| Error::Config(format!("{key} must have {N} entries")))
        }
        let unknown = || Error::Config(format!("unknown key `{key}` in section [{section}]"));
        match section {
            "run" => match key {
                "seed" => self.run.seed = num(key, value)?,
                "precision" => {
                    self.run.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(Error::Config(format!("bad precision `{value}`"))),
                    }
                }
                _ => return Err(unknown()),
            },
            "data" => match key {
                "num_speakers" => self.data.num_speakers = num(key, value)?,
                "utterances_per_speaker" => self.data.utterances_per_speaker = num(key, value)?,
                "utterance_seconds" => self.data.utterance_seconds = num(key, value)?,
                "noise_clips" => self.data.noise_clips = num(key, value)?,
                "noise_seconds" => self.data.noise_seconds = num(key, value)?,
                _ => return Err(unknown()),
            },
            "mel" => match key {
                "sample_rate" => self.mel.sample_rate = num(key, value)?,
                "window" => self.mel.window = num(key, value)?,
                "hop" => self.mel.hop = num(key, value)?,
                "fft_size" => self.mel.fft_size = num(key, value)?,
                "mel_bins" => self.mel.mel_bins = num(key, value)?,
                "f_min" => self.mel.f_min = num(key, value)?,
                "f_max" => self.mel.f_max = num(key, value)?,
                _ => return Err(unknown()),
            },
            "speaker" => match key {
                "first_conv_channels" => self.speaker.first_conv_channels = num(key, value)?,
                "block_depths" => self.speaker.block_depths = fixed::<4>(key, value)?,
                "embedding_dim" => self.speaker.embedding_dim = num(key, value)?,
                _ => return Err(unknown()),
            },
            "pretrain" => match key {
                "epochs" => self.pretrain.epochs = num(key, value)?,
                "batch_size" => self.pretrain.batch_size = num(key, value)?,
                "learning_rate" => self.pretrain.learning_rate = num(key, value)?,
                "warmup_epochs" => self.pretrain.warmup_epochs = num(key, value)?,
                "crop_frames" => self.pretrain.crop_frames = num(key, value)?,
                "adam_beta1" => self.pretrain.adam.beta1 = num(key, value)?,
                "adam_beta2" => self.pretrain.adam.beta2 = num(key, value)?,
                "adam_epsilon" => self.pretrain.adam.epsilon = num(key, value)?,
                _ => return Err(unknown()),
            },
            "unet" => match key {
                "first_conv_channels" => self.unet.first_conv_channels = num(key, value)?,
                "encoder_depths" => self.unet.encoder_depths = fixed::<4>(key, value)?,
                "decoder_depths" => self.unet.decoder_depths = fixed::<3>(key, value)?,
                _ => return Err(unknown()),
            },
            "train" => match key {
                "learning_rate" => self.train.learning_rate = num(key, value)?,
                "warmup_epochs" => self.train.warmup_epochs = num(key, value)?,
                "epochs" => self.train.epochs = num(key, value)?,
                "batch_size" => self.train.batch_size = num(key, value)?,
                "variant" => self.train.variant = value.parse::<LossVariant>()?,
                "crop_frames" => self.train.crop_frames = num(key, value)?,
                "snr_low" => self.train.snr_range_db.0 = num(key, value)?,
                "snr_high" => self.train.snr_range_db.1 = num(key, value)?,
                "babble_snrs" => self.train.babble_snrs_db = list(key, value)?,
                "babble_min_sources" => self.train.babble_sources.0 = num(key, value)?,
                "babble_max_sources" => self.train.babble_sources.1 = num(key, value)?,
                "holdout_speakers" => self.train.holdout_speakers = num(key, value)?,
                "adam_beta1" => self.train.adam.beta1 = num(key, value)?,
                "adam_beta2" => self.train.adam.beta2 = num(key, value)?,
                "adam_epsilon" => self.train.adam.epsilon = num(key, value)?,
                _ => return Err(unknown()),
            },
            "augment" => match key {
                "p_clean" => self.augment.p_clean = num(key, value)?,
                "p_noise" => self.augment.p_noise = num(key, value)?,
                "p_babble" => self.augment.p_babble = num(key, value)?,
                "noise_snrs" => self.augment.noise_snrs_db = list(key, value)?,
                "babble_snrs" => self.augment.babble_snrs_db = list(key, value)?,
                "babble_min_sources" => self.augment.babble_sources.0 = num(key, value)?,
                "babble_max_sources" => self.augment.babble_sources.1 = num(key, value)?,
                _ => return Err(unknown()),
            },
            "eval" => match key {
                "n_trials" => self.eval.n_trials = num(key, value)?,
                "noise_kind" => self.eval.noise_kind = value.parse()?,
                "snr_list" => {
                    self.eval.snr_list = value
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<Result<_>>()?
                }
                "p_target" => self.eval.p_target = num(key, value)?,
                "c_miss" => self.eval.c_miss = num(key, value)?,
                "c_fa" => self.eval.c_fa = num(key, value)?,
                _ => return Err(unknown()),
            },
            "" => {
                return Err(Error::Config(format!(
                    "key `{key}` appears before any [section] header"
                )))
            }
            _ => unreachable!("section validated at header"),
        }
        Ok(())
    }
}
