//! The masking U-Net: an encoder with the same shape family as the speaker
//! network's frame-level layers (independent, trainable parameters), three
//! deconvolution blocks joined to the encoder by skip connections, and a
//! final stride-2 transposed convolution + sigmoid producing a mask the
//! exact size of the input features. Enhancement is `E = M * X`.

use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{build_encoder, stage_channels, ConvSpec, Encoder, ForwardCtx, Init, NormSpec, StatsEvent};
use crate::params::ParamSet;
use crate::seeds;
use crate::tape::{ConvMode, NormMode, StatsMode, Tape};
use crate::tensor::{Precision, Tensor};

pub const UNET_SCOPE: &str = "unet";

/// Minimum frame count so four stride-2 stages stay valid.
pub const MIN_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub first_conv_channels: usize,
    /// Encoder conv layers per stage, same family as the speaker net.
    pub encoder_depths: [usize; 4],
    /// Transposed convs per deconv block; the paper-shaped option is [6, 4, 3].
    pub decoder_depths: [usize; 3],
    pub mel_bins: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            first_conv_channels: 8,
            encoder_depths: [2, 2, 2, 2],
            decoder_depths: [2, 2, 2],
            mel_bins: 24,
        }
    }
}

/// One deconv block: a stride-2 transposed conv (plus shape-preserving
/// ones after it), instance norm + ReLU, concat with the encoder skip,
/// then two convs with a projected residual connection.
struct DeconvBlock {
    trans: Vec<(ConvSpec, NormSpec)>,
    post1: ConvSpec,
    post1_norm: NormSpec,
    post2: ConvSpec,
    post2_norm: NormSpec,
    proj: ConvSpec,
}

/// Multiplicative time-frequency mask, entries in (0, 1) when produced by
/// the sigmoid head; the closed-interval limits are accepted so the
/// identity and zero masks remain expressible as stubs.
#[derive(Clone, Debug)]
pub struct Mask {
    tensor: Tensor,
}

impl Mask {
    pub fn from_values(values: Vec<f64>, frames: usize, bins: usize) -> Result<Mask> {
        if values.len() != frames * bins {
            return Err(Error::InvalidArgument {
                op: "Mask::from_values",
                msg: format!(
                    "expected {} values for {frames}x{bins}, got {}",
                    frames * bins,
                    values.len()
                ),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument {
                op: "Mask::from_values",
                msg: "mask entries must lie in [0, 1]".into(),
            });
        }
        let tape = Tape::new(Precision::F64);
        Ok(Mask {
            tensor: tape.constant(values, &[frames, bins]).detach(),
        })
    }

    /// The limiting all-ones mask (identity enhancement stub).
    pub fn identity(frames: usize, bins: usize) -> Mask {
        Mask::from_values(vec![1.0; frames * bins], frames, bins).unwrap()
    }

    pub(crate) fn from_tensor(tensor: Tensor) -> Mask {
        Mask { tensor }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.tensor.shape()[1]
    }
}

pub struct MaskEstimate {
    pub mask: Mask,
    pub stats_events: Vec<StatsEvent>,
}

pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamSet,
    encoder: Encoder,
    decoder: Vec<DeconvBlock>,
    final_conv: ConvSpec,
    precision: Precision,
    seed: u64,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64, precision: Precision) -> Result<Self> {
        for d in config.decoder_depths {
            if d == 0 {
                return Err(Error::Config("decoder depths must be >= 1".into()));
            }
        }
        let mut params = ParamSet::new(precision);
        let mut rng = seeds::rng_tagged("unet-init", &[seed]);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
            precision,
        };
        let encoder = build_encoder(
            &mut init,
            config.first_conv_channels,
            config.encoder_depths,
            NormMode::Batch,
        )?;
        let chans = stage_channels(config.first_conv_channels);
        // deconv block j: chans[3-j] -> chans[2-j], skip from encoder stage 2-j
        let mut decoder = Vec::with_capacity(3);
        for (j, &depth) in config.decoder_depths.iter().enumerate() {
            let c_in = chans[3 - j];
            let c_out = chans[2 - j];
            let name = |part: &str| format!("d{j}.{part}");
            let mut trans = Vec::with_capacity(depth);
            for ti in 0..depth {
                let (stride, pad, cin) = if ti == 0 {
                    ((2, 2), (0, 0), c_in)
                } else {
                    ((1, 1), (1, 1), c_out)
                };
                let conv = init.conv(
                    &name(&format!("t{ti}")),
                    c_out,
                    cin,
                    (3, 3),
                    ConvMode::Transposed,
                    stride,
                    pad,
                    false,
                );
                let norm = init.norm(&name(&format!("tn{ti}")), c_out, NormMode::Instance);
                trans.push((conv, norm));
            }
            let cat = 2 * c_out;
            let post1 = init.conv(&name("p1"), c_out, cat, (3, 3), ConvMode::Forward, (1, 1), (1, 1), false);
            let post1_norm = init.norm(&name("p1n"), c_out, NormMode::Instance);
            let post2 = init.conv(&name("p2"), c_out, c_out, (3, 3), ConvMode::Forward, (1, 1), (1, 1), false);
            let post2_norm = init.norm(&name("p2n"), c_out, NormMode::Instance);
            let proj = init.conv(&name("proj"), c_out, cat, (1, 1), ConvMode::Forward, (1, 1), (0, 0), false);
            decoder.push(DeconvBlock {
                trans,
                post1,
                post1_norm,
                post2,
                post2_norm,
                proj,
            });
        }
        // the last upsample doubles as the mask layer: one transposed
        // convolution down to a single channel, cropped to the input grid,
        // then sigmoid
        let final_conv = init.conv(
            "mask.conv",
            1,
            chans[0],
            (3, 3),
            ConvMode::Transposed,
            (2, 2),
            (0, 0),
            true,
        );
        Ok(UNet {
            config,
            params,
            encoder,
            decoder,
            final_conv,
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

    pub fn to_checkpoint(&self) -> crate::checkpoint::CheckpointData {
        let c = &self.config;
        let enc: Vec<String> = c.encoder_depths.iter().map(usize::to_string).collect();
        let dec: Vec<String> = c.decoder_depths.iter().map(usize::to_string).collect();
        crate::checkpoint::CheckpointData {
            kind: "unet".into(),
            seed: self.seed,
            frozen: self.params.frozen(),
            config: vec![
                ("first_conv_channels".into(), c.first_conv_channels.to_string()),
                ("encoder_depths".into(), enc.join(",")),
                ("decoder_depths".into(), dec.join(",")),
                ("mel_bins".into(), c.mel_bins.to_string()),
            ],
            tensors: crate::checkpoint::CheckpointData::tensors_from(&self.params),
        }
    }

    pub fn from_checkpoint(
        data: &crate::checkpoint::CheckpointData,
        precision: Precision,
    ) -> Result<UNet> {
        if data.kind != "unet" {
            return Err(Error::Checkpoint(format!(
                "expected a unet checkpoint, got kind `{}`",
                data.kind
            )));
        }
        let num = |key: &str| -> Result<usize> {
            data.config_value(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad config value for `{key}`")))
        };
        let parse_list = |key: &str, n: usize| -> Result<Vec<usize>> {
            let v: Vec<usize> = data
                .config_value(key)?
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad {key}"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(Error::Checkpoint(format!("{key} must have {n} entries")));
            }
            Ok(v)
        };
        let enc = parse_list("encoder_depths", 4)?;
        let dec = parse_list("decoder_depths", 3)?;
        let config = UNetConfig {
            first_conv_channels: num("first_conv_channels")?,
            encoder_depths: [enc[0], enc[1], enc[2], enc[3]],
            decoder_depths: [dec[0], dec[1], dec[2]],
            mel_bins: num("mel_bins")?,
        };
        let mut net = UNet::new(config, data.seed, precision)?;
        data.restore_into(&mut net.params)?;
        Ok(net)
    }

    /// Estimates the mask for a noisy feature map. The mask shape equals
    /// the input (T, F) exactly: every decoder stage is cropped or padded
    /// back to the extent recorded during the encoder pass.
    pub fn estimate_mask(
        &self,
        tape: &Tape,
        noisy: &FeatureMap,
        stats: StatsMode,
    ) -> Result<MaskEstimate> {
        let (t, f) = (noisy.frames(), noisy.bins());
        if f != self.config.mel_bins {
            return Err(Error::ShapeMismatch {
                op: "estimate_mask",
                axis: 2,
                expected: self.config.mel_bins,
                got: f,
            });
        }
        if t < MIN_FRAMES {
            return Err(Error::InvalidArgument {
                op: "estimate_mask",
                msg: format!("need at least {MIN_FRAMES} frames for four stride-2 stages, got {t}"),
            });
        }
        let ctx = ForwardCtx {
            tape,
            params: &self.params,
            scope: UNET_SCOPE,
            stats,
        };
        let mut events = Vec::new();
        let x = tape.constant(noisy.values().to_vec(), &[1, t, f]);
        let enc = self.encoder.forward(&ctx, &x, &mut events)?;
        let skips = &enc.stage_outputs;

        let mut d = skips[3].clone();
        for (j, block) in self.decoder.iter().enumerate() {
            let skip = &skips[2 - j];
            let (target_t, target_f) = (skip.shape()[1], skip.shape()[2]);
            for (ti, (conv, norm)) in block.trans.iter().enumerate() {
                d = conv.forward(&ctx, &d)?;
                if ti == 0 {
                    d = tape.crop_pad(&d, target_t, target_f)?;
                }
                d = norm.forward(&ctx, &d, &mut events)?;
                d = tape.relu(&d);
            }
            let cat = tape.concat_channels(&d, skip)?;
            let mut h = block.post1.forward(&ctx, &cat)?;
            h = block.post1_norm.forward(&ctx, &h, &mut events)?;
            h = tape.relu(&h);
            h = block.post2.forward(&ctx, &h)?;
            h = block.post2_norm.forward(&ctx, &h, &mut events)?;
            let shortcut = block.proj.forward(&ctx, &cat)?;
            let sum = tape.add(&h, &shortcut)?;
            d = tape.relu(&sum);
        }
        let up = self.final_conv.forward(&ctx, &d)?;
        let full = tape.crop_pad(&up, t, f)?;
        let logits = tape.reshape(&full, &[t, f])?;
        let mask = tape.sigmoid(&logits);
        Ok(MaskEstimate {
            mask: Mask::from_tensor(mask),
            stats_events: events,
        })
    }
}

/// `E = M * X` on the tape; gradients flow through the mask only, since
/// the noisy features enter as a constant.
pub fn enhance(tape: &Tape, noisy: &FeatureMap, mask: &Mask) -> Result<Tensor> {
    if mask.frames() != noisy.frames() || mask.bins() != noisy.bins() {
        let axis = usize::from(mask.frames() == noisy.frames());
        return Err(Error::ShapeMismatch {
            op: "enhance",
            axis,
            expected: if axis == 0 { noisy.frames() } else { noisy.bins() },
            got: if axis == 0 { mask.frames() } else { mask.bins() },
        });
    }
    let x = tape.constant(
        noisy.values().to_vec(),
        &[noisy.frames(), noisy.bins()],
    );
    tape.mul(mask.tensor(), &x)
}

/// Plain (tape-free) enhancement for the evaluation path.
pub fn enhance_features(noisy: &FeatureMap, mask_values: &[f64]) -> Result<FeatureMap> {
    if mask_values.len() != noisy.values().len() {
        return Err(Error::ShapeMismatch {
            op: "enhance",
            axis: 0,
            expected: noisy.values().len(),
            got: mask_values.len(),
        });
    }
    let values: Vec<f64> = noisy
        .values()
        .iter()
        .zip(mask_values)
        .map(|(x, m)| x * m)
        .collect();
    Ok(FeatureMap::from_parts(
        values,
        noisy.frames(),
        noisy.bins(),
        noisy.frame_shift_s(),
        noisy.mel_config().clone(),
    ))
}

/// Eval-time mask source: the trained U-Net or a stub.
pub trait MaskEstimator: Sync {
    fn mask_values(&self, noisy: &FeatureMap) -> Result<Vec<f64>>;
}

impl MaskEstimator for UNet {
    fn mask_values(&self, noisy: &FeatureMap) -> Result<Vec<f64>> {
        let tape = Tape::new(self.precision);
        let est = self.estimate_mask(&tape, noisy, StatsMode::Eval)?;
        Ok(est.mask.values().to_vec())
    }
}

/// Identity stub: mask of ones, enhancement becomes a no-op.
pub struct IdentityMask;

impl MaskEstimator for IdentityMask {
    fn mask_values(&self, noisy: &FeatureMap) -> Result<Vec<f64>> {
        Ok(vec![1.0; noisy.values().len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_features, synth_utterance, MelConfig};

    fn features(frames: usize, bins: usize) -> FeatureMap {
        let cfg = MelConfig {
            mel_bins: bins,
            ..MelConfig::default()
        };
        let seconds = (frames * cfg.hop + cfg.window) as f64 / 16_000.0 + 0.01;
        let w = synth_utterance(2, seconds, 5, 16_000);
        mel_features(&w, &cfg).unwrap().crop(0, frames).unwrap()
    }

    fn small_unet(bins: usize) -> UNet {
        UNet::new(
            UNetConfig {
                first_conv_channels: 4,
                encoder_depths: [2, 2, 2, 2],
                decoder_depths: [2, 2, 2],
                mel_bins: bins,
            },
            0,
            Precision::F64,
        )
        .unwrap()
    }

    #[test]
    fn mask_shape_matches_input_grid() {
        let unet = small_unet(24);
        for t in [16, 17, 23, 32, 45, 64] {
            let fm = features(t, 24);
            let tape = Tape::new(Precision::F64);
            let est = unet.estimate_mask(&tape, &fm, StatsMode::Eval).unwrap();
            assert_eq!(est.mask.frames(), t, "T = {t}");
            assert_eq!(est.mask.bins(), 24);
            assert!(est.mask.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn mask_is_deterministic_in_eval_mode() {
        let unet = small_unet(24);
        let fm = features(20, 24);
        let a = unet.mask_values(&fm).unwrap();
        let b = unet.mask_values(&fm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_input_and_bin_mismatch_rejected() {
        let unet = small_unet(24);
        let fm = features(15, 24);
        let tape = Tape::new(Precision::F64);
        assert!(unet.estimate_mask(&tape, &fm, StatsMode::Eval).is_err());
        let fm = features(32, 16);
        assert!(unet.estimate_mask(&tape, &fm, StatsMode::Eval).is_err());
    }

    #[test]
    fn enhance_limits_and_product() {
        let fm = features(16, 24);
        let tape = Tape::new(Precision::F64);

        let ones = Mask::identity(16, 24);
        let e = enhance(&tape, &fm, &ones).unwrap();
        assert_eq!(e.values(), fm.values());

        let zeros = Mask::from_values(vec![0.0; 16 * 24], 16, 24).unwrap();
        let e = enhance(&tape, &fm, &zeros).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhance_direct_product_example() {
        let tape = Tape::new(Precision::F64);
        let fm = FeatureMap::from_parts(vec![2.0, 4.0], 1, 2, 0.01, MelConfig::default());
        let m = Mask::from_values(vec![0.5, 0.25], 1, 2).unwrap();
        let e = enhance(&tape, &fm, &m).unwrap();
        assert_eq!(e.values(), &[1.0, 1.0]);
    }

    #[test]
    fn attenuation_property() {
        let unet = small_unet(24);
        let fm = features(24, 24);
        let mask = unet.mask_values(&fm).unwrap();
        let e = enhance_features(&fm, &mask).unwrap();
        for (ev, xv) in e.values().iter().zip(fm.values()) {
            assert!(*ev >= 0.0 && ev <= xv);
        }
    }

    #[test]
    fn gradient_reaches_unet_parameters() {
        let unet = small_unet(24);
        let fm = features(16, 24);
        let tape = Tape::new(Precision::F64);
        let est = unet.estimate_mask(&tape, &fm, StatsMode::Eval).unwrap();
        let e = enhance(&tape, &fm, &est.mask).unwrap();
        let loss = tape.sum_all(&e).unwrap();
        let out = tape.backward_to(&loss, &[]).unwrap();
        let total: f64 = out
            .param_grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.abs())
            .sum();
        assert!(total > 0.0, "no gradient reached the U-Net parameters");
        assert!(out.param_grads.keys().all(|k| k.starts_with("unet.")));
    }

    #[test]
    fn mask_from_values_validates_range() {
        assert!(Mask::from_values(vec![0.5, 1.5], 1, 2).is_err());
        assert!(Mask::from_values(vec![0.0, 1.0], 1, 2).is_ok());
    }
}
