//! Verification scoring: cosine scores over embeddings, EER and minDCF by
//! threshold sweep (the brute-force sweep is the defining semantics), and
//! trial-set evaluation under synthetic noise conditions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::dsp::{mel_features, mix_at_snr, synth_noise, synth_utterance, MelConfig, NoiseKind};
use crate::error::{Error, Result};
use crate::seeds;
use crate::speaker::SpeakerNet;
use crate::unet::{enhance_features, MaskEstimator};

// ── Trials ───────────────────────────────────────────────────────────

/// Reference to a synthesizable utterance: `spk{speaker}_utt{seed}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UttRef {
    pub speaker: u64,
    pub utt_seed: u64,
}

impl UttRef {
    pub fn id(&self) -> String {
        format!("spk{}_utt{}", self.speaker, self.utt_seed)
    }
}

impl FromStr for UttRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix("spk")
            .ok_or_else(|| Error::Metric(format!("unresolvable utterance ref `{s}`")))?;
        let (spk, utt) = rest
            .split_once("_utt")
            .ok_or_else(|| Error::Metric(format!("unresolvable utterance ref `{s}`")))?;
        Ok(UttRef {
            speaker: spk
                .parse()
                .map_err(|_| Error::Metric(format!("bad speaker in `{s}`")))?,
            utt_seed: utt
                .parse()
                .map_err(|_| Error::Metric(format!("bad utterance seed in `{s}`")))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub target: bool,
    pub enroll: UttRef,
    pub test: UttRef,
}

#[derive(Clone, Debug, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    /// Text lines "label enroll_id test_id" with label 1 for target.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&format!(
                "{} {} {}\n",
                u8::from(t.target),
                t.enroll.id(),
                t.test.id()
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TrialSet> {
        let mut trials = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (label, enroll, test) = (
                parts.next().ok_or_else(|| Error::Metric(format!("line {ln}: missing label")))?,
                parts.next().ok_or_else(|| Error::Metric(format!("line {ln}: missing enroll")))?,
                parts.next().ok_or_else(|| Error::Metric(format!("line {ln}: missing test")))?,
            );
            let target = match label {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Metric(format!("line {ln}: bad label `{other}`")));
                }
            };
            trials.push(Trial {
                target,
                enroll: enroll.parse()?,
                test: test.parse()?,
            });
        }
        Ok(TrialSet { trials })
    }
}

/// Seeded synthetic trial list over the given speakers: alternating
/// target/nontarget pairs with fresh utterance seeds from `utt_seed_base`.
pub fn generate_trials(
    speakers: &[u64],
    n_trials: usize,
    seed: u64,
    utt_seed_base: u64,
) -> Result<TrialSet> {
    if speakers.len() < 2 {
        return Err(Error::Metric("need at least 2 speakers for trials".into()));
    }
    let mut rng = seeds::rng_tagged("trials", &[seed]);
    let mut trials = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let target = i % 2 == 0;
        let (s1, s2) = if target {
            let s = speakers[rng.gen_range(0..speakers.len())];
            (s, s)
        } else {
            let a = rng.gen_range(0..speakers.len());
            let mut b = rng.gen_range(0..speakers.len() - 1);
            if b >= a {
                b += 1;
            }
            (speakers[a], speakers[b])
        };
        trials.push(Trial {
            target,
            enroll: UttRef {
                speaker: s1,
                utt_seed: utt_seed_base + 2 * i as u64,
            },
            test: UttRef {
                speaker: s2,
                utt_seed: utt_seed_base + 2 * i as u64 + 1,
            },
        });
    }
    Ok(TrialSet { trials })
}

// ── Scores and metrics ───────────────────────────────────────────────

pub fn cosine_score(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_score",
            axis: 0,
            expected: e1.len(),
            got: e2.len(),
        });
    }
    let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Metric("zero-norm embedding".into()));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    Ok(dot / (n1 * n2))
}

/// Operating points of the accept-if-score>=threshold rule, swept from
/// "accept none" through every distinct score in descending order.
/// Returns (threshold, far, frr) triples.
fn sweep_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metric_sweep",
            axis: 0,
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_target = labels.iter().filter(|&&l| l).count();
    let n_nontarget = labels.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Metric(
            "need at least one target and one nontarget trial".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = Vec::with_capacity(scores.len() + 1);
    // accept none
    points.push((f64::INFINITY, 0.0, 1.0));
    let mut acc_t = 0usize;
    let mut acc_n = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // process the whole tie group at this threshold
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                acc_t += 1;
            } else {
                acc_n += 1;
            }
            i += 1;
        }
        points.push((
            s,
            acc_n as f64 / n_nontarget as f64,
            1.0 - acc_t as f64 / n_target as f64,
        ));
    }
    Ok(points)
}

/// Equal error rate: swept over every distinct score with linear
/// interpolation of the FAR/FRR crossing, ties broken toward the lower
/// threshold. Returns (eer, threshold at the crossing).
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let points = sweep_points(scores, labels)?;
    for w in points.windows(2) {
        let (th0, far0, frr0) = w[0];
        let (th1, far1, frr1) = w[1];
        if far1 >= frr1 {
            // crossing inside this segment
            let num = frr0 - far0;
            let den = (far1 - far0) + (frr0 - frr1);
            let t = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 1.0 };
            let eer = far0 + t * (far1 - far0);
            let th = if th0.is_finite() {
                th0 + t * (th1 - th0)
            } else {
                th1
            };
            return Ok((eer, th));
        }
    }
    // FAR never reaches FRR before the sweep ends: every score accepted
    let last = points.last().unwrap();
    Ok((last.1.max(last.2), last.0))
}

/// Minimum normalized detection cost over the same sweep.
pub fn compute_min_dcf(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<f64> {
    if !(0.0 < p_target && p_target < 1.0) {
        return Err(Error::Metric(format!("p_target must be in (0,1), got {p_target}")));
    }
    if c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::Metric("detection costs must be positive".into()));
    }
    let points = sweep_points(scores, labels)?;
    let mut min_cost = f64::INFINITY;
    for (_, far, frr) in points {
        let cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far;
        min_cost = min_cost.min(cost);
    }
    let floor = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    Ok(min_cost / floor)
}

// ── Trial evaluation ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Clean,
    Snr(f64),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Clean => f.write_str("clean"),
            Condition::Snr(db) => {
                if db.fract() == 0.0 {
                    write!(f, "{db:.0}")
                } else {
                    write!(f, "{db}")
                }
            }
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "clean" {
            return Ok(Condition::Clean);
        }
        s.parse::<f64>()
            .map(Condition::Snr)
            .map_err(|_| Error::Metric(format!("bad condition `{s}` (expected dB value or `clean`)")))
    }
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub condition: Condition,
    pub variant: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub n_trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,variant,eer,min_dcf,n_trials,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.condition, r.variant, r.eer, r.min_dcf, r.n_trials, r.seed
            ));
        }
        out
    }
}

/// Caches clean enrollment embeddings across conditions and systems.
#[derive(Default)]
pub struct EmbedCache {
    map: HashMap<String, Vec<f64>>,
}

pub struct EvalSetup<'a> {
    pub speaker: &'a SpeakerNet,
    pub enhancer: Option<&'a dyn MaskEstimator>,
    pub noise_kind: NoiseKind,
    pub mel: &'a MelConfig,
    pub utterance_seconds: f64,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

/// Evaluates one condition over the trial set: the test utterance is
/// synthesized and mixed at the condition's SNR (the clean condition skips
/// mixing), optionally enhanced, and scored by cosine against the clean,
/// never-enhanced enrollment embedding.
pub fn run_trial_eval(
    trials: &TrialSet,
    setup: &EvalSetup,
    condition: Condition,
    seed: u64,
    variant_label: &str,
    cache: &mut EmbedCache,
) -> Result<EvalRow> {
    if trials.trials.is_empty() {
        return Err(Error::Metric("empty trial set".into()));
    }
    let sr = setup.mel.sample_rate;
    let dur = setup.utterance_seconds;

    // enroll side: clean embeddings, deduplicated and cached
    let mut missing: Vec<UttRef> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in &trials.trials {
        let id = t.enroll.id();
        if !cache.map.contains_key(&id) && seen.insert(id) {
            missing.push(t.enroll.clone());
        }
    }
    let computed: Vec<(String, Vec<f64>)> = missing
        .par_iter()
        .map(|r| -> Result<(String, Vec<f64>)> {
            let w = synth_utterance(r.speaker, dur, r.utt_seed, sr);
            let fm = mel_features(&w, setup.mel)?;
            Ok((r.id(), setup.speaker.embed(&fm)?))
        })
        .collect::<Result<_>>()?;
    for (id, e) in computed {
        cache.map.insert(id, e);
    }

    // test side, parallel per trial, merged in trial order
    let scores: Vec<f64> = trials
        .trials
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<f64> {
            let w = synth_utterance(t.test.speaker, dur, t.test.utt_seed, sr);
            let test_wave = match condition {
                Condition::Clean => w,
                Condition::Snr(db) => {
                    let nseed = seeds::mix(&[seeds::tag("eval-noise"), seed, i as u64]);
                    let noise = synth_noise(setup.noise_kind, dur, nseed, sr);
                    mix_at_snr(&w, &noise, db)?.mixture
                }
            };
            let mut fm = mel_features(&test_wave, setup.mel)?;
            if let Some(enh) = setup.enhancer {
                let mask = enh.mask_values(&fm)?;
                fm = enhance_features(&fm, &mask)?;
            }
            let e_test = setup.speaker.embed(&fm)?;
            let e_enroll = &cache.map[&t.enroll.id()];
            cosine_score(e_enroll, &e_test)
        })
        .collect::<Result<_>>()?;

    let labels: Vec<bool> = trials.trials.iter().map(|t| t.target).collect();
    let (eer, _) = compute_eer(&scores, &labels)?;
    let min_dcf = compute_min_dcf(&scores, &labels, setup.p_target, setup.c_miss, setup.c_fa)?;
    Ok(EvalRow {
        condition,
        variant: variant_label.to_string(),
        eer,
        min_dcf,
        n_trials: trials.trials.len(),
        seed,
    })
}
