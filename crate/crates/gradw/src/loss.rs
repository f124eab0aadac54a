//! Gradient-weighted enhancement losses.
//!
//! The frozen speaker network is run on the clean reference and on the
//! enhanced features; one backward pass per side taps the gradient of the
//! target-speaker logit with respect to the pre-pooling activation map.
//! Where the enhanced gradient exceeds the clean one the enhancer has
//! introduced structure the speaker model attends to, so the per-bin
//! distance is normalized into a weight map that scales the L1 deviation
//! of the two activation maps. The weight map is detached: no gradient
//! flows from the loss into the distance or into either gradient map.

use std::fmt;
use std::str::FromStr;

use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::speaker::SpeakerNet;
use crate::tape::{BcastDomain, Tape};
use crate::tensor::Tensor;

/// Gradient of the target-speaker logit with respect to the activation
/// map, `[C, T', F']`. Plain data: it carries no tape history.
#[derive(Clone, Debug)]
pub struct GradientMap {
    pub values: Vec<f64>,
    pub shape: [usize; 3],
    pub source: GradSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradSource {
    Ref,
    Enh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    /// sum_c(enh - ref) per (t, f): positive where the enhanced gradient
    /// exceeds the clean one (artifact evidence).
    Artifact,
    /// sum_c(ref - enh): residual-noise evidence.
    Residual,
    /// sum_c |enh - ref|: both at once.
    Both,
    /// sum_(t,f)(enh - ref) per channel.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceDomain {
    TimeFreq,
    Channel,
}

#[derive(Clone, Debug)]
pub struct DistanceMap {
    pub values: Vec<f64>,
    pub domain: DistanceDomain,
    /// (T', F') for the time-frequency domain, (C, 1) for channels.
    pub grid: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScheme {
    Softmax,
    MinMax,
    SoftmaxPlusOne,
    /// Softmax over the channel-summed clean gradient alone.
    CleanSoftmax,
}

#[derive(Clone, Debug)]
pub struct WeightMap {
    pub values: Vec<f64>,
    pub scheme: WeightScheme,
    pub domain: DistanceDomain,
    pub grid: (usize, usize),
}

/// The eight selectable loss variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    GradW,
    EqualW,
    CleanW,
    ResW,
    NoSoftmax,
    Channel,
    Residual,
    Both,
}

pub const ALL_VARIANTS: [LossVariant; 8] = [
    LossVariant::GradW,
    LossVariant::EqualW,
    LossVariant::CleanW,
    LossVariant::ResW,
    LossVariant::NoSoftmax,
    LossVariant::Channel,
    LossVariant::Residual,
    LossVariant::Both,
];

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::GradW => "grad_w",
            LossVariant::EqualW => "equal_w",
            LossVariant::CleanW => "clean_w",
            LossVariant::ResW => "res_w",
            LossVariant::NoSoftmax => "no_softmax",
            LossVariant::Channel => "channel",
            LossVariant::Residual => "residual",
            LossVariant::Both => "both",
        }
    }

    /// (distance, weight scheme, broadcast domain); None for equal_w.
    fn recipe(self) -> Option<(DistanceMode, WeightScheme, DistanceDomain)> {
        match self {
            LossVariant::GradW => Some((
                DistanceMode::Artifact,
                WeightScheme::Softmax,
                DistanceDomain::TimeFreq,
            )),
            LossVariant::EqualW => None,
            LossVariant::CleanW => Some((
                DistanceMode::Artifact, // unused: clean_w sums g_ref alone
                WeightScheme::CleanSoftmax,
                DistanceDomain::TimeFreq,
            )),
            LossVariant::ResW => Some((
                DistanceMode::Artifact,
                WeightScheme::SoftmaxPlusOne,
                DistanceDomain::TimeFreq,
            )),
            LossVariant::NoSoftmax => Some((
                DistanceMode::Artifact,
                WeightScheme::MinMax,
                DistanceDomain::TimeFreq,
            )),
            LossVariant::Channel => Some((
                DistanceMode::Channel,
                WeightScheme::Softmax,
                DistanceDomain::Channel,
            )),
            LossVariant::Residual => Some((
                DistanceMode::Residual,
                WeightScheme::Softmax,
                DistanceDomain::TimeFreq,
            )),
            LossVariant::Both => Some((
                DistanceMode::Both,
                WeightScheme::Softmax,
                DistanceDomain::TimeFreq,
            )),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

// ── Gradient taps ────────────────────────────────────────────────────

/// One forward pass with the activation map tapped, one backward pass from
/// the target-speaker logit. The model is untouched (its parameter
/// gradients are discarded).
pub fn gradient_map(
    model: &SpeakerNet,
    features: &FeatureMap,
    target_speaker: usize,
) -> Result<GradientMap> {
    if !model.frozen() {
        return Err(Error::InvalidArgument {
            op: "gradient_map",
            msg: "model must be frozen".into(),
        });
    }
    if target_speaker >= model.config.num_speakers {
        return Err(Error::InvalidArgument {
            op: "gradient_map",
            msg: format!(
                "target speaker {target_speaker} out of range for {} classes",
                model.config.num_speakers
            ),
        });
    }
    let tape = Tape::new(model.precision());
    let trace = model.forward(&tape, features, crate::tape::StatsMode::Eval, true)?;
    let y = tape.select(&trace.logits, target_speaker)?;
    let out = tape.backward_to(&y, &[&trace.activation])?;
    let g = &out.tap_grads[0];
    Ok(GradientMap {
        values: g.values.clone(),
        shape: [g.shape[0], g.shape[1], g.shape[2]],
        source: GradSource::Ref,
    })
}

// ── Distances ────────────────────────────────────────────────────────

pub fn artifact_distance(
    g_enh: &GradientMap,
    g_ref: &GradientMap,
    mode: DistanceMode,
) -> Result<DistanceMap> {
    if g_enh.shape != g_ref.shape {
        let axis = (0..3).find(|&i| g_enh.shape[i] != g_ref.shape[i]).unwrap();
        return Err(Error::ShapeMismatch {
            op: "artifact_distance",
            axis,
            expected: g_ref.shape[axis],
            got: g_enh.shape[axis],
        });
    }
    let [c, t, f] = g_enh.shape;
    let plane = t * f;
    match mode {
        DistanceMode::Artifact | DistanceMode::Residual | DistanceMode::Both => {
            let mut values = vec![0.0; plane];
            for ch in 0..c {
                let e = &g_enh.values[ch * plane..(ch + 1) * plane];
                let r = &g_ref.values[ch * plane..(ch + 1) * plane];
                for (d, (ev, rv)) in values.iter_mut().zip(e.iter().zip(r)) {
                    *d += match mode {
                        DistanceMode::Artifact => ev - rv,
                        DistanceMode::Residual => rv - ev,
                        DistanceMode::Both => (ev - rv).abs(),
                        DistanceMode::Channel => unreachable!(),
                    };
                }
            }
            Ok(DistanceMap {
                values,
                domain: DistanceDomain::TimeFreq,
                grid: (t, f),
            })
        }
        DistanceMode::Channel => {
            let mut values = vec![0.0; c];
            for ch in 0..c {
                let e = &g_enh.values[ch * plane..(ch + 1) * plane];
                let r = &g_ref.values[ch * plane..(ch + 1) * plane];
                values[ch] = e.iter().zip(r).map(|(ev, rv)| ev - rv).sum();
            }
            Ok(DistanceMap {
                values,
                domain: DistanceDomain::Channel,
                grid: (c, 1),
            })
        }
    }
}

/// Channel sum of the clean gradient alone (the clean-weighting variant).
pub fn clean_distance(g_ref: &GradientMap) -> DistanceMap {
    let [c, t, f] = g_ref.shape;
    let plane = t * f;
    let mut values = vec![0.0; plane];
    for ch in 0..c {
        for (d, rv) in values
            .iter_mut()
            .zip(&g_ref.values[ch * plane..(ch + 1) * plane])
        {
            *d += rv;
        }
    }
    DistanceMap {
        values,
        domain: DistanceDomain::TimeFreq,
        grid: (t, f),
    }
}

// ── Weight maps ──────────────────────────────────────────────────────

fn softmax_plain(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Normalizes a distance map into weights. The result is plain data, so
/// no gradient flows from the loss into the distance or further back into
/// the gradient maps.
pub fn weight_map(d: &DistanceMap, scheme: WeightScheme) -> Result<WeightMap> {
    let values = match scheme {
        WeightScheme::Softmax | WeightScheme::CleanSoftmax => softmax_plain(&d.values),
        WeightScheme::SoftmaxPlusOne => softmax_plain(&d.values)
            .into_iter()
            .map(|v| v + 1.0)
            .collect(),
        WeightScheme::MinMax => {
            let min = d.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = d.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= min {
                return Err(Error::InvalidArgument {
                    op: "weight_map",
                    msg: "min-max normalization of a constant map is degenerate".into(),
                });
            }
            d.values.iter().map(|v| (v - min) / (max - min)).collect()
        }
    };
    Ok(WeightMap {
        values,
        scheme,
        domain: d.domain,
        grid: d.grid,
    })
}

// ── Losses ───────────────────────────────────────────────────────────

fn weighted_l1(
    tape: &Tape,
    a_ref: &Tensor,
    a_enh: &Tensor,
    weight: Option<(&Tensor, BcastDomain)>,
) -> Result<Tensor> {
    let diff = tape.sub(a_ref, a_enh)?;
    let absd = tape.abs(&diff);
    let weighted = match weight {
        Some((w, domain)) => tape.mul_bcast(&absd, w, domain)?,
        None => absd,
    };
    tape.sum_all(&weighted)
}

fn bcast_of(domain: DistanceDomain) -> BcastDomain {
    match domain {
        DistanceDomain::TimeFreq => BcastDomain::TimeFreq,
        DistanceDomain::Channel => BcastDomain::Channel,
    }
}

/// Weighted (or unweighted) L1 deviation of the two activation maps.
/// Gradient flows through `a_enh` only; `a_ref` is detached internally and
/// the weight map enters as a constant.
pub fn enhancement_loss(
    tape: &Tape,
    a_ref: &Tensor,
    a_enh: &Tensor,
    p: Option<&WeightMap>,
    variant: LossVariant,
) -> Result<Tensor> {
    if a_ref.shape() != a_enh.shape() {
        let axis = a_ref
            .shape()
            .iter()
            .zip(a_enh.shape())
            .position(|(x, y)| x != y)
            .unwrap_or(0);
        return Err(Error::ShapeMismatch {
            op: "enhancement_loss",
            axis,
            expected: a_ref.shape()[axis],
            got: a_enh.shape()[axis],
        });
    }
    let a_ref = a_ref.detach();
    match (variant.recipe(), p) {
        (None, None) => weighted_l1(tape, &a_ref, a_enh, None),
        (None, Some(_)) => Err(Error::InvalidArgument {
            op: "enhancement_loss",
            msg: "equal_w takes no weight map".into(),
        }),
        (Some(_), None) => Err(Error::InvalidArgument {
            op: "enhancement_loss",
            msg: format!("variant {variant} requires a weight map"),
        }),
        (Some((_, _, domain)), Some(p)) => {
            if p.domain != domain {
                return Err(Error::InvalidArgument {
                    op: "enhancement_loss",
                    msg: format!("variant {variant} expects a {domain:?}-domain weight map"),
                });
            }
            let expected = match domain {
                DistanceDomain::TimeFreq => a_ref.shape()[1] * a_ref.shape()[2],
                DistanceDomain::Channel => a_ref.shape()[0],
            };
            if p.values.len() != expected {
                return Err(Error::ShapeMismatch {
                    op: "enhancement_loss",
                    axis: usize::from(domain == DistanceDomain::TimeFreq),
                    expected,
                    got: p.values.len(),
                });
            }
            let w = tape.constant(p.values.clone(), &[p.values.len()]);
            weighted_l1(tape, &a_ref, a_enh, Some((&w, bcast_of(domain))))
        }
    }
}

/// Side products of `compose_loss`, for diagnostics and for the
/// detachment contract checks.
pub struct ComposeOutput {
    pub loss: Tensor,
    /// Channel-mean of the clean-side activation map, (values, t, f).
    pub a_ref_mean: (Vec<f64>, usize, usize),
    pub a_enh_mean: (Vec<f64>, usize, usize),
    pub d: Option<DistanceMap>,
    pub p: Option<WeightMap>,
    pub g_ref: Option<GradientMap>,
    pub g_enh: Option<GradientMap>,
    /// The on-tape distance leaf feeding the weight path, tapped; the
    /// weight used in the loss is a detached copy of its normalization,
    /// so backward from the loss reports exactly zero for this tensor.
    pub pre_detach: Option<Tensor>,
    /// False for equal_w, which skips both gradient backward passes.
    pub gradients_computed: bool,
}

fn channel_mean(a: &Tensor) -> (Vec<f64>, usize, usize) {
    let (c, t, f) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let plane = t * f;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&a.values()[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= c as f64;
    }
    (out, t, f)
}

/// Full loss pipeline on one (clean, enhanced) pair: forward the frozen
/// model on both sides with the activation maps tapped, derive the
/// gradient maps from the target-speaker logit, normalize the distance
/// into a detached weight map, and return the weighted L1 scalar whose
/// backward pass reaches only the enhancer's parameters. The equal_w
/// variant skips the gradient computation entirely.
pub fn compose_loss(
    tape: &Tape,
    frozen_model: &SpeakerNet,
    clean_feat: &FeatureMap,
    enh_feat: &Tensor,
    target_speaker: usize,
    variant: LossVariant,
) -> Result<ComposeOutput> {
    if !frozen_model.frozen() {
        return Err(Error::InvalidArgument {
            op: "compose_loss",
            msg: "speaker model must be frozen".into(),
        });
    }
    if enh_feat.tape_node().is_none() {
        return Err(Error::InvalidArgument {
            op: "compose_loss",
            msg: "enhanced features must be on the active tape".into(),
        });
    }
    let eval = crate::tape::StatsMode::Eval;
    let ref_trace = frozen_model.forward(tape, clean_feat, eval, true)?;
    let enh_trace = frozen_model.forward_tensor(tape, enh_feat, eval, true)?;
    let a_ref = &ref_trace.activation;
    let a_enh = &enh_trace.activation;
    let a_ref_mean = channel_mean(a_ref);
    let a_enh_mean = channel_mean(a_enh);

    let Some((mode, scheme, domain)) = variant.recipe() else {
        let loss = enhancement_loss(tape, a_ref, a_enh, None, variant)?;
        return Ok(ComposeOutput {
            loss,
            a_ref_mean,
            a_enh_mean,
            d: None,
            p: None,
            g_ref: None,
            g_enh: None,
            pre_detach: None,
            gradients_computed: false,
        });
    };

    let y_ref = tape.select(&ref_trace.logits, target_speaker)?;
    let ref_back = tape.backward_to(&y_ref, &[a_ref])?;
    let g_ref = GradientMap {
        values: ref_back.tap_grads[0].values.clone(),
        shape: [a_ref.shape()[0], a_ref.shape()[1], a_ref.shape()[2]],
        source: GradSource::Ref,
    };
    // the enhanced-side tap needs no adjoints below the enhanced features:
    // everything deeper belongs to the enhancer, whose gradients this
    // backward pass discards anyway
    let y_enh = tape.select(&enh_trace.logits, target_speaker)?;
    let enh_back = tape.backward_to_with_floor(&y_enh, &[a_enh], Some(enh_feat))?;
    let g_enh = GradientMap {
        values: enh_back.tap_grads[0].values.clone(),
        shape: g_ref.shape,
        source: GradSource::Enh,
    };

    let d = if scheme == WeightScheme::CleanSoftmax {
        clean_distance(&g_ref)
    } else {
        artifact_distance(&g_enh, &g_ref, mode)?
    };
    let p = weight_map(&d, scheme)?;

    // Detachment, observable on the tape: the distance enters as a tapped
    // leaf, the normalization runs as tape ops, and only a detached copy
    // reaches the loss.
    let d_leaf = tape.leaf(d.values.clone(), &[d.values.len()]);
    tape.mark_tap(&d_leaf)?;
    let p_pre = match scheme {
        WeightScheme::Softmax | WeightScheme::CleanSoftmax => tape.softmax_over(&d_leaf, &[0])?,
        WeightScheme::SoftmaxPlusOne => {
            let sm = tape.softmax_over(&d_leaf, &[0])?;
            let ones = tape.constant(vec![1.0; d.values.len()], &[d.values.len()]);
            tape.add(&sm, &ones)?
        }
        // min/max extraction is not a tape op; the weight is data either way
        WeightScheme::MinMax => tape.leaf(p.values.clone(), &[p.values.len()]),
    };
    let w = p_pre.detach();
    let loss = weighted_l1(tape, &a_ref.detach(), a_enh, Some((&w, bcast_of(domain))))?;
    Ok(ComposeOutput {
        loss,
        a_ref_mean,
        a_enh_mean,
        d: Some(d),
        p: Some(p),
        g_ref: Some(g_ref),
        g_enh: Some(g_enh),
        pre_detach: Some(d_leaf),
        gradients_computed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::tape::ReduceKind;
    use crate::tensor::Precision;
    use rand::Rng;

    fn gmap(values: Vec<f64>, shape: [usize; 3], source: GradSource) -> GradientMap {
        GradientMap {
            values,
            shape,
            source,
        }
    }

    #[test]
    fn variant_names_round_trip_and_reject_unknown() {
        for v in ALL_VARIANTS {
            assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
        }
        let err = "gradw".parse::<LossVariant>().unwrap_err().to_string();
        for v in ALL_VARIANTS {
            assert!(err.contains(v.name()), "{err} missing {}", v.name());
        }
    }

    #[test]
    fn distance_modes_on_single_channel() {
        let e = gmap(vec![1.0, -1.0], [1, 1, 2], GradSource::Enh);
        let r = gmap(vec![0.0, 0.0], [1, 1, 2], GradSource::Ref);
        let artifact = artifact_distance(&e, &r, DistanceMode::Artifact).unwrap();
        assert_eq!(artifact.values, vec![1.0, -1.0]);
        let residual = artifact_distance(&e, &r, DistanceMode::Residual).unwrap();
        assert_eq!(residual.values, vec![-1.0, 1.0]);
        let both = artifact_distance(&e, &r, DistanceMode::Both).unwrap();
        assert_eq!(both.values, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_gradients_give_zero_distance_in_every_mode() {
        let vals: Vec<f64> = (0..12).map(|i| 0.3 * f64::from(i)).collect();
        let e = gmap(vals.clone(), [2, 2, 3], GradSource::Enh);
        let r = gmap(vals, [2, 2, 3], GradSource::Ref);
        for mode in [
            DistanceMode::Artifact,
            DistanceMode::Residual,
            DistanceMode::Both,
            DistanceMode::Channel,
        ] {
            let d = artifact_distance(&e, &r, mode).unwrap();
            assert!(d.values.iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn artifact_is_exact_negation_of_residual() {
        let mut rng = seeds::rng_tagged("antisym", &[0]);
        let n = 3 * 4 * 5;
        let ev: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let e = gmap(ev, [3, 4, 5], GradSource::Enh);
        let r = gmap(rv, [3, 4, 5], GradSource::Ref);
        let a = artifact_distance(&e, &r, DistanceMode::Artifact).unwrap();
        let s = artifact_distance(&e, &r, DistanceMode::Residual).unwrap();
        let b = artifact_distance(&e, &r, DistanceMode::Both).unwrap();
        for i in 0..a.values.len() {
            assert_eq!(a.values[i].to_bits(), (-s.values[i]).to_bits());
            assert!(b.values[i] >= a.values[i].abs());
        }
    }

    #[test]
    fn channel_distance_has_channel_shape() {
        let e = gmap(vec![1.0; 24], [2, 3, 4], GradSource::Enh);
        let r = gmap(vec![0.5; 24], [2, 3, 4], GradSource::Ref);
        let d = artifact_distance(&e, &r, DistanceMode::Channel).unwrap();
        assert_eq!(d.domain, DistanceDomain::Channel);
        assert_eq!(d.values, vec![6.0, 6.0]);
    }

    #[test]
    fn weight_map_examples() {
        let uniform = DistanceMap {
            values: vec![0.7; 6],
            domain: DistanceDomain::TimeFreq,
            grid: (2, 3),
        };
        let w = weight_map(&uniform, WeightScheme::Softmax).unwrap();
        for v in &w.values {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }

        let d = DistanceMap {
            values: vec![0.0, 3f64.ln()],
            domain: DistanceDomain::TimeFreq,
            grid: (1, 2),
        };
        let sm = weight_map(&d, WeightScheme::Softmax).unwrap();
        assert!((sm.values[0] - 0.25).abs() < 1e-12);
        assert!((sm.values[1] - 0.75).abs() < 1e-12);
        let sp = weight_map(&d, WeightScheme::SoftmaxPlusOne).unwrap();
        assert!((sp.values[0] - 1.25).abs() < 1e-12);
        assert!((sp.values[1] - 1.75).abs() < 1e-12);
        assert!((sp.values.iter().sum::<f64>() - 3.0).abs() < 1e-6);

        let mm = weight_map(
            &DistanceMap {
                values: vec![2.0, 4.0, 6.0],
                domain: DistanceDomain::TimeFreq,
                grid: (1, 3),
            },
            WeightScheme::MinMax,
        )
        .unwrap();
        assert_eq!(mm.values, vec![0.0, 0.5, 1.0]);

        assert!(weight_map(&uniform, WeightScheme::MinMax).is_err());
    }

    #[test]
    fn enhancement_loss_examples() {
        let tape = Tape::new(Precision::F64);
        // a_ref == a_enh -> 0 under every variant
        let a = tape.constant(vec![0.5; 8], &[2, 2, 2]);
        let same = enhancement_loss(&tape, &a, &a, None, LossVariant::EqualW).unwrap();
        assert_eq!(same.item(), 0.0);

        // hand-evaluated weighted sum
        let a_ref = tape.constant(vec![1.0, 2.0], &[1, 1, 2]);
        let a_enh = tape.constant(vec![0.0, 4.0], &[1, 1, 2]);
        let p = WeightMap {
            values: vec![0.75, 0.25],
            scheme: WeightScheme::Softmax,
            domain: DistanceDomain::TimeFreq,
            grid: (1, 2),
        };
        let loss = enhancement_loss(&tape, &a_ref, &a_enh, Some(&p), LossVariant::GradW).unwrap();
        assert!((loss.item() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_reduce_to_equal_w() {
        let mut rng = seeds::rng_tagged("uniform-reduction", &[1]);
        for _ in 0..20 {
            let (c, t, f) = (3, 4, 5);
            let tape = Tape::new(Precision::F64);
            let av: Vec<f64> = (0..c * t * f).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bv: Vec<f64> = (0..c * t * f).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a_ref = tape.constant(av, &[c, t, f]);
            let a_enh = tape.constant(bv, &[c, t, f]);
            let n = (t * f) as f64;
            let p = WeightMap {
                values: vec![1.0 / n; t * f],
                scheme: WeightScheme::Softmax,
                domain: DistanceDomain::TimeFreq,
                grid: (t, f),
            };
            let weighted =
                enhancement_loss(&tape, &a_ref, &a_enh, Some(&p), LossVariant::GradW).unwrap();
            let equal =
                enhancement_loss(&tape, &a_ref, &a_enh, None, LossVariant::EqualW).unwrap();
            let rel = (weighted.item() - equal.item() / n).abs() / (equal.item() / n);
            assert!(rel < 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn tap_gradient_matches_degenerate_pooling_closed_form() {
        // head: mean-pool A over (t, f), single affine to logits.
        // d logit_k / d A[c, t, f] = weight[k, c] / (T x F), constant per channel.
        let (c, t, f) = (3, 4, 5);
        let tape = Tape::new(Precision::F64);
        let mut rng = seeds::rng_tagged("degenerate-head", &[2]);
        let a_vals: Vec<f64> = (0..c * t * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_vals: Vec<f64> = (0..2 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = tape.leaf(a_vals, &[c, t, f]);
        tape.mark_tap(&a).unwrap();
        let pooled = tape.reduce(&a, ReduceKind::Mean, &[1, 2]).unwrap();
        let w = tape.constant(w_vals.clone(), &[2, c]);
        let b = tape.constant(vec![0.0; 2], &[2]);
        let logits = tape.affine(&pooled, &w, &b).unwrap();
        let k = 1;
        let y = tape.select(&logits, k).unwrap();
        let out = tape.backward_to(&y, &[&a]).unwrap();
        let g = &out.tap_grads[0].values;
        let n = (t * f) as f64;
        for ch in 0..c {
            let expected = w_vals[k * c + ch] / n;
            for v in &g[ch * t * f..(ch + 1) * t * f] {
                assert!((v - expected).abs() < 1e-12);
            }
        }
    }
}
