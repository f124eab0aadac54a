//! The speaker recognition network: stem + four stride-2 conv stages,
//! mean+std pooling over (t, f), an embedding projection and a classifier
//! head. Pretrained on clean/augmented synthetic speech, then frozen and
//! used both as the gradient source for enhancement training and as the
//! downstream verification embedder.

use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{build_encoder, Encoder, ForwardCtx, Init, StatsEvent};
use crate::params::ParamSet;
use crate::seeds;
use crate::tape::{NormMode, ReduceKind, StatsMode, Tape};
use crate::tensor::{Precision, Tensor};

pub const SPEAKER_SCOPE: &str = "speaker";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerNetConfig {
    pub first_conv_channels: usize,
    /// Conv layers per stage; the paper-shaped option is [6, 8, 12, 6].
    pub block_depths: [usize; 4],
    pub embedding_dim: usize,
    pub num_speakers: usize,
    /// Expected feature width; forwards reject anything else.
    pub mel_bins: usize,
}

impl Default for SpeakerNetConfig {
    fn default() -> Self {
        SpeakerNetConfig {
            first_conv_channels: 8,
            block_depths: [2, 2, 2, 2],
            embedding_dim: 32,
            num_speakers: 8,
            mel_bins: 24,
        }
    }
}

/// One utterance's forward results: the pre-pooling activation map
/// (tapped on request), the embedding and the speaker logits.
pub struct ForwardTrace {
    pub activation: Tensor,
    pub embedding: Tensor,
    pub logits: Tensor,
    pub target_logit_index: Option<usize>,
    /// Batch-norm observations from train-mode forwards; empty in eval.
    pub stats_events: Vec<StatsEvent>,
}

pub struct SpeakerNet {
    pub config: SpeakerNetConfig,
    pub params: ParamSet,
    encoder: Encoder,
    embed_w: String,
    embed_b: String,
    head_w: String,
    head_b: String,
    precision: Precision,
    seed: u64,
}

impl SpeakerNet {
    pub fn new(config: SpeakerNetConfig, seed: u64, precision: Precision) -> Result<Self> {
        if config.num_speakers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 speakers, got {}",
                config.num_speakers
            )));
        }
        let mut params = ParamSet::new(precision);
        let mut rng = seeds::rng_tagged("speaker-init", &[seed]);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
            precision,
        };
        let encoder = build_encoder(
            &mut init,
            config.first_conv_channels,
            config.block_depths,
            NormMode::Batch,
        )?;
        let pooled_dim = 2 * encoder.out_channels;
        let (embed_w, embed_b) = init.affine("embed", config.embedding_dim, pooled_dim);
        let (head_w, head_b) = init.affine("head", config.num_speakers, config.embedding_dim);
        Ok(SpeakerNet {
            config,
            params,
            encoder,
            embed_w,
            embed_b,
            head_w,
            head_b,
            precision,
            seed,
        })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn out_channels(&self) -> usize {
        self.encoder.out_channels
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn frozen(&self) -> bool {
        self.params.frozen()
    }

    fn check_bins(&self, bins: usize) -> Result<()> {
        if bins != self.config.mel_bins {
            return Err(Error::ShapeMismatch {
                op: "speaker_forward",
                axis: 2,
                expected: self.config.mel_bins,
                got: bins,
            });
        }
        Ok(())
    }

    /// Forward from a plain feature map (constant input).
    pub fn forward(
        &self,
        tape: &Tape,
        features: &FeatureMap,
        stats: StatsMode,
        tap: bool,
    ) -> Result<ForwardTrace> {
        self.check_bins(features.bins())?;
        let x = tape.constant(
            features.values().to_vec(),
            &[features.frames(), features.bins()],
        );
        self.forward_tensor(tape, &x, stats, tap)
    }

    /// Forward from a `[T, F]` tensor already on the tape (the enhanced
    /// path), so gradients can flow back into its producers.
    pub fn forward_tensor(
        &self,
        tape: &Tape,
        features: &Tensor,
        stats: StatsMode,
        tap: bool,
    ) -> Result<ForwardTrace> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "speaker_forward",
                msg: format!("expected [T, F] features, got {} dims", shape.len()),
            });
        }
        self.check_bins(shape[1])?;
        let x = tape.reshape(features, &[1, shape[0], shape[1]])?;
        let ctx = ForwardCtx {
            tape,
            params: &self.params,
            scope: SPEAKER_SCOPE,
            stats,
        };
        let mut events = Vec::new();
        let enc = self.encoder.forward(&ctx, &x, &mut events)?;
        let activation = enc.stage_outputs.last().unwrap().clone();
        if tap {
            tape.mark_tap(&activation)?;
        }
        let (embedding, logits) = self.head_from_activation(tape, &activation)?;
        Ok(ForwardTrace {
            activation,
            embedding,
            logits,
            target_logit_index: None,
            stats_events: events,
        })
    }

    /// Pooling + affine head from a given activation map. Split out so the
    /// head can be driven directly from a perturbed activation.
    pub fn head_from_activation(&self, tape: &Tape, a: &Tensor) -> Result<(Tensor, Tensor)> {
        let pooled = tape.reduce(a, ReduceKind::MeanAndStd, &[1, 2])?;
        let ew = tape.param(
            &format!("{SPEAKER_SCOPE}.{}", self.embed_w),
            self.params.param(&self.embed_w)?,
        );
        let eb = tape.param(
            &format!("{SPEAKER_SCOPE}.{}", self.embed_b),
            self.params.param(&self.embed_b)?,
        );
        let embedding = tape.affine(&pooled, &ew, &eb)?;
        let hw = tape.param(
            &format!("{SPEAKER_SCOPE}.{}", self.head_w),
            self.params.param(&self.head_w)?,
        );
        let hb = tape.param(
            &format!("{SPEAKER_SCOPE}.{}", self.head_b),
            self.params.param(&self.head_b)?,
        );
        let logits = tape.affine(&embedding, &hw, &hb)?;
        Ok((embedding, logits))
    }

    /// Deterministic eval-mode embedding.
    pub fn embed(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        let tape = Tape::new(self.precision);
        let trace = self.forward(&tape, features, StatsMode::Eval, false)?;
        Ok(trace.embedding.to_vec())
    }

    /// Unit-normalized copy of the embedding, for scoring.
    pub fn embed_normalized(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        let e = self.embed(features)?;
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Metric("zero-norm embedding".into()));
        }
        Ok(e.into_iter().map(|v| v / norm).collect())
    }

    pub fn to_checkpoint(&self) -> crate::checkpoint::CheckpointData {
        let c = &self.config;
        let depths: Vec<String> = c.block_depths.iter().map(usize::to_string).collect();
        crate::checkpoint::CheckpointData {
            kind: "speaker".into(),
            seed: self.seed,
            frozen: self.frozen(),
            config: vec![
                ("first_conv_channels".into(), c.first_conv_channels.to_string()),
                ("block_depths".into(), depths.join(",")),
                ("embedding_dim".into(), c.embedding_dim.to_string()),
                ("num_speakers".into(), c.num_speakers.to_string()),
                ("mel_bins".into(), c.mel_bins.to_string()),
            ],
            tensors: crate::checkpoint::CheckpointData::tensors_from(&self.params),
        }
    }

    pub fn from_checkpoint(
        data: &crate::checkpoint::CheckpointData,
        precision: Precision,
    ) -> Result<SpeakerNet> {
        if data.kind != "speaker" {
            return Err(Error::Checkpoint(format!(
                "expected a speaker checkpoint, got kind `{}`",
                data.kind
            )));
        }
        let num = |key: &str| -> Result<usize> {
            data.config_value(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad config value for `{key}`")))
        };
        let depths: Vec<usize> = data
            .config_value("block_depths")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint("bad block_depths".into())))
            .collect::<Result<_>>()?;
        if depths.len() != 4 {
            return Err(Error::Checkpoint("block_depths must have 4 entries".into()));
        }
        let config = SpeakerNetConfig {
            first_conv_channels: num("first_conv_channels")?,
            block_depths: [depths[0], depths[1], depths[2], depths[3]],
            embedding_dim: num("embedding_dim")?,
            num_speakers: num("num_speakers")?,
            mel_bins: num("mel_bins")?,
        };
        let mut net = SpeakerNet::new(config, data.seed, precision)?;
        data.restore_into(&mut net.params)?;
        if data.frozen {
            net.freeze();
        }
        Ok(net)
    }

    /// Eval-mode argmax class.
    pub fn classify(&self, features: &FeatureMap) -> Result<usize> {
        let tape = Tape::new(self.precision);
        let trace = self.forward(&tape, features, StatsMode::Eval, false)?;
        let logits = trace.logits.values();
        Ok(logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_features, synth_utterance, MelConfig};

    fn small_net() -> SpeakerNet {
        SpeakerNet::new(
            SpeakerNetConfig {
                first_conv_channels: 8,
                block_depths: [2, 2, 2, 2],
                embedding_dim: 32,
                num_speakers: 8,
                mel_bins: 24,
            },
            0,
            Precision::F64,
        )
        .unwrap()
    }

    fn features(frames: usize) -> FeatureMap {
        let cfg = MelConfig::default();
        let seconds = (frames * cfg.hop + cfg.window) as f64 / 16_000.0;
        let w = synth_utterance(1, seconds + 0.01, 3, 16_000);
        let fm = mel_features(&w, &cfg).unwrap();
        fm.crop(0, frames).unwrap()
    }

    #[test]
    fn activation_shape_follows_stride_arithmetic() {
        let net = small_net();
        let fm = features(32);
        let tape = Tape::new(Precision::F64);
        let trace = net.forward(&tape, &fm, StatsMode::Eval, false).unwrap();
        assert_eq!(trace.activation.shape(), &[64, 2, 2]);
        assert_eq!(trace.logits.len(), 8);
        assert_eq!(trace.embedding.len(), 32);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = small_net();
        let fm = features(32);
        let t1 = Tape::new(Precision::F64);
        let a = net.forward(&t1, &fm, StatsMode::Eval, false).unwrap();
        let t2 = Tape::new(Precision::F64);
        let b = net.forward(&t2, &fm, StatsMode::Eval, false).unwrap();
        for (x, y) in a.logits.values().iter().zip(b.logits.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.stats_events.is_empty());
    }

    #[test]
    fn feature_width_mismatch_rejected() {
        let net = small_net();
        let cfg = MelConfig {
            mel_bins: 20,
            ..MelConfig::default()
        };
        let w = synth_utterance(1, 0.5, 3, 16_000);
        let fm = mel_features(&w, &cfg).unwrap();
        let tape = Tape::new(Precision::F64);
        assert!(matches!(
            net.forward(&tape, &fm, StatsMode::Eval, false),
            Err(Error::ShapeMismatch { axis: 2, .. })
        ));
    }

    #[test]
    fn embedding_is_unit_normalized() {
        let net = small_net();
        let fm = features(32);
        let e = net.embed_normalized(&fm).unwrap();
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let e2 = net.embed(&fm).unwrap();
        let e3 = net.embed(&fm).unwrap();
        assert_eq!(e2, e3);
    }

    #[test]
    fn single_speaker_config_rejected() {
        let cfg = SpeakerNetConfig {
            num_speakers: 1,
            ..SpeakerNetConfig::default()
        };
        assert!(SpeakerNet::new(cfg, 0, Precision::F64).is_err());
    }
}
