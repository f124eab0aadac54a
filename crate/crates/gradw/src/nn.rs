//! Layer and block builders shared by the speaker network and the U-Net
//! encoder. Layers hold parameter names; values live in the owning model's
//! `ParamSet` and are bound onto the tape at forward time under the model's
//! scope prefix.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{he_normal, normal, Param, ParamSet};
use crate::tape::{ChannelStats, ConvMode, NormMode, StatsMode, Tape};
use crate::tensor::{Precision, Tensor};

/// Momentum for folding observed batch statistics into running buffers.
pub const BN_MOMENTUM: f64 = 0.1;

/// Observed batch-norm statistics from one train-mode forward, to be folded
/// into the named running buffers by the training loop (in sample order, so
/// parallel batch construction stays deterministic).
#[derive(Clone, Debug)]
pub struct StatsEvent {
    pub rmean_key: String,
    pub rvar_key: String,
    pub stats: ChannelStats,
}

/// Folds observed statistics into the running buffers:
/// `new = (1 - momentum) * old + momentum * observed`.
pub fn apply_stats_events(params: &mut ParamSet, events: &[StatsEvent], momentum: f64) -> Result<()> {
    for ev in events {
        let fold = |old: &Param, obs: &[f64]| -> Vec<f64> {
            old.values()
                .iter()
                .zip(obs)
                .map(|(o, n)| (1.0 - momentum) * o + momentum * n)
                .collect()
        };
        let m = fold(params.buffer(&ev.rmean_key)?, &ev.stats.mean);
        params.set_buffer_values(&ev.rmean_key, m)?;
        let v = fold(params.buffer(&ev.rvar_key)?, &ev.stats.var);
        params.set_buffer_values(&ev.rvar_key, v)?;
    }
    Ok(())
}

pub struct ForwardCtx<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamSet,
    pub scope: &'a str,
    pub stats: StatsMode,
}

impl ForwardCtx<'_> {
    fn bind(&self, name: &str) -> Result<Tensor> {
        let p = self.params.param(name)?;
        Ok(self.tape.param(&format!("{}.{}", self.scope, name), p))
    }
}

#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub w: String,
    pub b: Option<String>,
    pub mode: ConvMode,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvSpec {
    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let w = ctx.bind(&self.w)?;
        let b = match &self.b {
            Some(name) => Some(ctx.bind(name)?),
            None => None,
        };
        ctx.tape
            .conv_layer(x, &w, b.as_ref(), self.mode, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct NormSpec {
    pub gamma: String,
    pub beta: String,
    /// Running-stat buffer names; unused in instance mode.
    pub rmean: String,
    pub rvar: String,
    pub mode: NormMode,
    pub eps: f64,
}

impl NormSpec {
    pub fn forward(
        &self,
        ctx: &ForwardCtx,
        x: &Tensor,
        events: &mut Vec<StatsEvent>,
    ) -> Result<Tensor> {
        let gamma = ctx.bind(&self.gamma)?;
        let beta = ctx.bind(&self.beta)?;
        let use_running = self.mode == NormMode::Batch && ctx.stats == StatsMode::Eval;
        let (rm, rv);
        let running = if use_running {
            rm = ctx.params.buffer(&self.rmean)?.values().to_vec();
            rv = ctx.params.buffer(&self.rvar)?.values().to_vec();
            Some((rm.as_slice(), rv.as_slice()))
        } else {
            None
        };
        let (out, observed) =
            ctx.tape
                .normalize_2d(x, self.mode, &gamma, &beta, ctx.stats, running, self.eps)?;
        if self.mode == NormMode::Batch {
            if let Some(stats) = observed {
                events.push(StatsEvent {
                    rmean_key: self.rmean.clone(),
                    rvar_key: self.rvar.clone(),
                    stats,
                });
            }
        }
        Ok(out)
    }
}

/// Two 3x3 convs with a shortcut; the first conv optionally downsamples,
/// in which case the shortcut is a strided 1x1 projection.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvSpec,
    pub norm1: NormSpec,
    pub conv2: ConvSpec,
    pub norm2: NormSpec,
    pub proj: Option<(ConvSpec, NormSpec)>,
}

impl BasicBlock {
    pub fn forward(
        &self,
        ctx: &ForwardCtx,
        x: &Tensor,
        events: &mut Vec<StatsEvent>,
    ) -> Result<Tensor> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.norm1.forward(ctx, &h, events)?;
        let h = ctx.tape.relu(&h);
        let h = self.conv2.forward(ctx, &h)?;
        let h = self.norm2.forward(ctx, &h, events)?;
        let shortcut = match &self.proj {
            Some((conv, norm)) => {
                let s = conv.forward(ctx, x)?;
                norm.forward(ctx, &s, events)?
            }
            None => x.clone(),
        };
        let sum = ctx.tape.add(&h, &shortcut)?;
        Ok(ctx.tape.relu(&sum))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<BasicBlock>,
}

/// Stem conv plus four stride-2 stages with channel doubling from the
/// second stage on: channels [c0, 2c0, 4c0, 8c0].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem_conv: ConvSpec,
    pub stem_norm: NormSpec,
    pub stages: Vec<EncoderStage>,
    pub out_channels: usize,
}

pub struct EncoderOutput {
    /// Output of each stage, in order; the last is the encoder output.
    pub stage_outputs: Vec<Tensor>,
}

impl Encoder {
    pub fn forward(
        &self,
        ctx: &ForwardCtx,
        x: &Tensor,
        events: &mut Vec<StatsEvent>,
    ) -> Result<EncoderOutput> {
        let h = self.stem_conv.forward(ctx, x)?;
        let h = self.stem_norm.forward(ctx, &h, events)?;
        let mut h = ctx.tape.relu(&h);
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(ctx, &h, events)?;
            }
            stage_outputs.push(h.clone());
        }
        Ok(EncoderOutput { stage_outputs })
    }
}

// ── Builders ─────────────────────────────────────────────────────────

pub struct Init<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
    pub precision: Precision,
}

impl Init<'_> {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: (usize, usize),
        mode: ConvMode,
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    ) -> ConvSpec {
        let fan_in = c_in * k.0 * k.1;
        let n = c_out * c_in * k.0 * k.1;
        let w_name = format!("{name}.w");
        self.params.insert_param(
            &w_name,
            he_normal(self.rng, n, fan_in, self.precision),
            match mode {
                ConvMode::Forward => vec![c_out, c_in, k.0, k.1],
                ConvMode::Transposed => vec![c_in, c_out, k.0, k.1],
            },
        );
        let b = if bias {
            let b_name = format!("{name}.b");
            self.params.insert_param(&b_name, vec![0.0; c_out], vec![c_out]);
            Some(b_name)
        } else {
            None
        };
        ConvSpec {
            w: w_name,
            b,
            mode,
            stride,
            pad,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, mode: NormMode) -> NormSpec {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        self.params.insert_param(&gamma, vec![1.0; channels], vec![channels]);
        self.params.insert_param(&beta, vec![0.0; channels], vec![channels]);
        let rmean = format!("{name}.rmean");
        let rvar = format!("{name}.rvar");
        if mode == NormMode::Batch {
            self.params.insert_buffer(&rmean, vec![0.0; channels], vec![channels]);
            self.params.insert_buffer(&rvar, vec![1.0; channels], vec![channels]);
        }
        NormSpec {
            gamma,
            beta,
            rmean,
            rvar,
            mode,
            eps: 1e-5,
        }
    }

    /// Affine layer with 1/sqrt(fan_in) init.
    pub fn affine(&mut self, name: &str, out_dim: usize, in_dim: usize) -> (String, String) {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| self.precision.quantize(normal(self.rng) * std))
            .collect();
        let w_name = format!("{name}.w");
        let b_name = format!("{name}.b");
        self.params.insert_param(&w_name, w, vec![out_dim, in_dim]);
        self.params.insert_param(&b_name, vec![0.0; out_dim], vec![out_dim]);
        (w_name, b_name)
    }
}

/// Output channels of each encoder stage for a given stem width.
pub fn stage_channels(first_conv_channels: usize) -> [usize; 4] {
    let c = first_conv_channels;
    [c, 2 * c, 4 * c, 8 * c]
}

/// Builds the stem + four stride-2 stages. `block_depths[i]` counts conv
/// layers in stage i and must be even (two per basic block).
pub fn build_encoder(
    init: &mut Init,
    first_conv_channels: usize,
    block_depths: [usize; 4],
    norm_mode: NormMode,
) -> Result<Encoder> {
    if first_conv_channels == 0 {
        return Err(Error::Config("first_conv_channels must be positive".into()));
    }
    for d in block_depths {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!(
                "block depths must be even and >= 2, got {d}"
            )));
        }
    }
    let chans = stage_channels(first_conv_channels);
    let stem_conv = init.conv(
        "stem.conv",
        first_conv_channels,
        1,
        (3, 3),
        ConvMode::Forward,
        (1, 1),
        (1, 1),
        false,
    );
    let stem_norm = init.norm("stem.norm", first_conv_channels, norm_mode);
    let mut stages = Vec::with_capacity(4);
    let mut c_in = first_conv_channels;
    for (si, &depth) in block_depths.iter().enumerate() {
        let c_out = chans[si];
        let mut blocks = Vec::with_capacity(depth / 2);
        for bi in 0..depth / 2 {
            let name = |part: &str| format!("s{si}.b{bi}.{part}");
            let (stride, cin_block) = if bi == 0 { ((2, 2), c_in) } else { ((1, 1), c_out) };
            let conv1 = init.conv(
                &name("c1"),
                c_out,
                cin_block,
                (3, 3),
                ConvMode::Forward,
                stride,
                (1, 1),
                false,
            );
            let norm1 = init.norm(&name("n1"), c_out, norm_mode);
            let conv2 = init.conv(
                &name("c2"),
                c_out,
                c_out,
                (3, 3),
                ConvMode::Forward,
                (1, 1),
                (1, 1),
                false,
            );
            let norm2 = init.norm(&name("n2"), c_out, norm_mode);
            let proj = if bi == 0 {
                let pc = init.conv(
                    &name("proj"),
                    c_out,
                    cin_block,
                    (1, 1),
                    ConvMode::Forward,
                    (2, 2),
                    (0, 0),
                    false,
                );
                let pn = init.norm(&name("projn"), c_out, norm_mode);
                Some((pc, pn))
            } else {
                None
            };
            blocks.push(BasicBlock {
                conv1,
                norm1,
                conv2,
                norm2,
                proj,
            });
        }
        stages.push(EncoderStage { blocks });
        c_in = c_out;
    }
    Ok(Encoder {
        stem_conv,
        stem_norm,
        stages,
        out_channels: chans[3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn encoder_shape_follows_stride_arithmetic() {
        let mut params = ParamSet::new(Precision::F64);
        let mut rng = seeds::rng_tagged("enc-test", &[0]);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
            precision: Precision::F64,
        };
        let enc = build_encoder(&mut init, 4, [2, 2, 2, 2], NormMode::Batch).unwrap();
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(vec![0.3; 32 * 24], &[1, 32, 24]);
        let ctx = ForwardCtx {
            tape: &tape,
            params: &params,
            scope: "t",
            stats: StatsMode::Train,
        };
        let mut events = Vec::new();
        let out = enc.forward(&ctx, &x, &mut events).unwrap();
        let shapes: Vec<Vec<usize>> = out.stage_outputs.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![4, 16, 12]);
        assert_eq!(shapes[1], vec![8, 8, 6]);
        assert_eq!(shapes[2], vec![16, 4, 3]);
        assert_eq!(shapes[3], vec![32, 2, 2]); // ceil(3/2) = 2 on frequency
        assert!(!events.is_empty());
    }

    #[test]
    fn odd_block_depth_rejected() {
        let mut params = ParamSet::new(Precision::F64);
        let mut rng = seeds::rng_tagged("enc-test", &[1]);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
            precision: Precision::F64,
        };
        assert!(build_encoder(&mut init, 4, [2, 3, 2, 2], NormMode::Batch).is_err());
    }

    #[test]
    fn stats_events_fold_into_buffers() {
        let mut params = ParamSet::new(Precision::F64);
        params.insert_buffer("n.rmean", vec![0.0, 0.0], vec![2]);
        params.insert_buffer("n.rvar", vec![1.0, 1.0], vec![2]);
        let events = vec![StatsEvent {
            rmean_key: "n.rmean".into(),
            rvar_key: "n.rvar".into(),
            stats: ChannelStats {
                mean: vec![1.0, 2.0],
                var: vec![3.0, 5.0],
            },
        }];
        apply_stats_events(&mut params, &events, 0.1).unwrap();
        let rm = params.buffer("n.rmean").unwrap();
        assert!((rm.values()[0] - 0.1).abs() < 1e-12);
        assert!((rm.values()[1] - 0.2).abs() < 1e-12);
        let rv = params.buffer("n.rvar").unwrap();
        assert!((rv.values()[0] - (0.9 + 0.3)).abs() < 1e-12);
    }
}
