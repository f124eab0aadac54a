//! Library implementations of the pipeline subcommands. Each command
//! writes its outputs under `out_dir/{manifests,checkpoints,reports,
//! diagnostics}`, embeds the resolved configuration next to them, and is
//! idempotent: a rerun with the same seed and inputs overwrites every
//! artifact with identical bytes.

use std::path::{Path, PathBuf};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::ExperimentConfig;
use crate::dsp::{
    mel_features, read_wav, synth_noise, synth_utterance, write_wav, NoiseKind, Waveform,
};
use crate::error::{Error, Result};
use crate::loss::{compose_loss, LossVariant, ALL_VARIANTS};
use crate::metrics::{
    generate_trials, run_trial_eval, Condition, EmbedCache, EvalReport, EvalSetup, TrialSet,
};
use crate::report::{write_csv_grid, write_pgm, write_text};
use crate::seeds;
use crate::speaker::SpeakerNet;
use crate::tape::Tape;
use crate::train::{pretrain_speaker, train_enhancer, Corpus, TrainOutput, Utterance};
use crate::unet::{enhance, Mask, MaskEstimator, UNet};

pub fn ensure_layout(out_dir: &Path) -> Result<()> {
    for sub in ["manifests", "checkpoints", "reports", "diagnostics"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

fn echo_config(cfg: &ExperimentConfig, out_dir: &Path, command: &str) -> Result<()> {
    write_text(&out_dir.join(format!("config_{command}.cfg")), &cfg.to_text())
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifests").join("manifest.txt")
}

pub fn speaker_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints").join("speaker.ckpt")
}

// ── synth-data ───────────────────────────────────────────────────────

/// Writes WAV files for `num_speakers x utterances_per_speaker` plus the
/// noise pool, and a manifest line per file: id, speaker id (-1 for
/// noise), relative path, duration.
pub fn cmd_synth_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    ensure_layout(out_dir)?;
    let wav_dir = out_dir.join("manifests").join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let seed = cfg.run.seed;
    let sr = cfg.mel.sample_rate;
    let mut manifest = String::from("# utterance_id speaker_id path duration_s\n");
    for speaker in 0..cfg.data.num_speakers {
        for utt in 0..cfg.data.utterances_per_speaker {
            let utt_seed = seeds::mix(&[seeds::tag("corpus-utt"), seed, utt as u64]);
            let w = synth_utterance(
                speaker as u64,
                cfg.data.utterance_seconds,
                utt_seed,
                sr,
            );
            let id = format!("spk{speaker}_utt{utt:03}");
            let rel = format!("wav/{id}.wav");
            write_wav(&wav_dir.join(format!("{id}.wav")), &w)?;
            manifest.push_str(&format!(
                "{id} {speaker} {rel} {}\n",
                cfg.data.utterance_seconds
            ));
        }
    }
    let kinds = [NoiseKind::White, NoiseKind::Tonal];
    for i in 0..cfg.data.noise_clips {
        let kind = kinds[i % 2];
        let nseed = seeds::mix(&[seeds::tag("corpus-noise"), seed, i as u64]);
        let w = synth_noise(kind, cfg.data.noise_seconds, nseed, sr);
        let id = format!("noise_{}_{i:02}", kind.name());
        let rel = format!("wav/{id}.wav");
        write_wav(&wav_dir.join(format!("{id}.wav")), &w)?;
        manifest.push_str(&format!("{id} -1 {rel} {}\n", cfg.data.noise_seconds));
    }
    let path = manifest_path(out_dir);
    write_text(&path, &manifest)?;
    echo_config(cfg, out_dir, "synth_data")?;
    Ok(path)
}

/// Reads the speech rows of a manifest back into a corpus.
pub fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut utterances = Vec::new();
    let mut max_speaker = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Corpus(format!(
                "{}:{}: expected 4 fields, got {}",
                manifest.display(),
                ln + 1,
                parts.len()
            )));
        }
        let speaker_id: i64 = parts[1]
            .parse()
            .map_err(|_| Error::Corpus(format!("bad speaker id `{}`", parts[1])))?;
        if speaker_id < 0 {
            continue; // noise pool entry
        }
        let speaker_id = speaker_id as usize;
        max_speaker = max_speaker.max(speaker_id);
        utterances.push(Utterance {
            id: parts[0].to_string(),
            speaker_id,
            waveform: read_wav(&base.join(parts[2]))?,
        });
    }
    if utterances.is_empty() {
        return Err(Error::Corpus(format!(
            "no utterances found in {}",
            manifest.display()
        )));
    }
    Ok(Corpus {
        utterances,
        num_speakers: max_speaker + 1,
    })
}

// ── pretrain ─────────────────────────────────────────────────────────

pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    pub train_accuracy: f64,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PretrainArtifacts> {
    ensure_layout(out_dir)?;
    let corpus = load_corpus(&manifest_path(out_dir))?;
    let out = pretrain_speaker(
        &cfg.speaker_net_config(),
        &corpus,
        &cfg.augment,
        &cfg.pretrain,
        &cfg.mel,
        cfg.run.seed,
        cfg.run.precision,
    )?;
    let ckpt = speaker_checkpoint_path(out_dir);
    write_checkpoint(&ckpt, &out.model.to_checkpoint())?;

    let mut csv = String::from("epoch,train_loss,val_loss,accuracy,lr,seconds\n");
    for (r, acc) in out.log.records.iter().zip(&out.epoch_accuracy) {
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{:.4},{:.9e},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, acc, r.lr, r.seconds
        ));
    }
    let log_csv = out_dir.join("reports").join("pretrain_log.csv");
    write_text(&log_csv, &csv)?;
    echo_config(cfg, out_dir, "pretrain")?;
    Ok(PretrainArtifacts {
        checkpoint: ckpt,
        log_csv,
        train_accuracy: out.train_accuracy,
    })
}

// ── train-enh ────────────────────────────────────────────────────────

pub struct TrainEnhArtifacts {
    pub best_checkpoint: PathBuf,
    pub log_csv: PathBuf,
    pub output: TrainOutput,
}

pub fn cmd_train_enh(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    variant: Option<LossVariant>,
) -> Result<TrainEnhArtifacts> {
    ensure_layout(out_dir)?;
    let corpus = load_corpus(&manifest_path(out_dir))?;
    let speaker = load_speaker(cfg, &speaker_checkpoint_path(out_dir))?;
    let mut train_cfg = cfg.train_config();
    if let Some(v) = variant {
        train_cfg.variant = v;
    }
    let tag = train_cfg.variant.name().to_string();
    let mut unet = UNet::new(cfg.unet_config(), cfg.run.seed, cfg.run.precision)?;
    let ckpt_dir = out_dir.join("checkpoints");
    let output = train_enhancer(
        &mut unet,
        &speaker,
        &corpus,
        &train_cfg,
        &cfg.mel,
        Some(&ckpt_dir),
        &tag,
    )?;
    let log_csv = out_dir.join("reports").join(format!("train_{tag}.csv"));
    write_text(&log_csv, &output.log.to_csv())?;
    echo_config(cfg, out_dir, &format!("train_enh_{tag}"))?;
    Ok(TrainEnhArtifacts {
        best_checkpoint: output
            .best_checkpoint
            .clone()
            .expect("checkpoint dir was provided"),
        log_csv,
        output,
    })
}

fn load_speaker(cfg: &ExperimentConfig, path: &Path) -> Result<SpeakerNet> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing speaker checkpoint {}; run `pretrain` first",
            path.display()
        )));
    }
    SpeakerNet::from_checkpoint(&read_checkpoint(path)?, cfg.run.precision)
}

fn load_unet(cfg: &ExperimentConfig, path: &Path) -> Result<UNet> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing enhancer checkpoint {}; run `train-enh` first",
            path.display()
        )));
    }
    UNet::from_checkpoint(&read_checkpoint(path)?, cfg.run.precision)
}

// ── evaluate ─────────────────────────────────────────────────────────

pub struct EvaluateArtifacts {
    pub report: EvalReport,
    pub report_csv: PathBuf,
}

/// Evaluates one system (the given enhancer checkpoint, or the noisy
/// baseline when none) over every condition in `snr_list`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    snr_list: Option<Vec<Condition>>,
    enhancer_ckpt: Option<&Path>,
    label: Option<&str>,
    trials_file: Option<&Path>,
) -> Result<EvaluateArtifacts> {
    ensure_layout(out_dir)?;
    let speaker = load_speaker(cfg, &speaker_checkpoint_path(out_dir))?;
    let unet = match enhancer_ckpt {
        Some(p) => Some(load_unet(cfg, p)?),
        None => None,
    };
    let label = match (label, enhancer_ckpt) {
        (Some(l), _) => l.to_string(),
        (None, Some(p)) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "enhanced".into()),
        (None, None) => "noisy".into(),
    };
    let trials = match trials_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrialSet::from_text(&text)?
        }
        None => {
            let speakers: Vec<u64> = (0..cfg.data.num_speakers as u64).collect();
            generate_trials(&speakers, cfg.eval.n_trials, cfg.run.seed, 10_000)?
        }
    };
    let conditions = snr_list.unwrap_or_else(|| cfg.eval.snr_list.clone());
    let setup = EvalSetup {
        speaker: &speaker,
        enhancer: unet.as_ref().map(|u| u as &dyn MaskEstimator),
        noise_kind: cfg.eval.noise_kind,
        mel: &cfg.mel,
        utterance_seconds: cfg.data.utterance_seconds,
        p_target: cfg.eval.p_target,
        c_miss: cfg.eval.c_miss,
        c_fa: cfg.eval.c_fa,
    };
    let mut cache = EmbedCache::default();
    let mut report = EvalReport::default();
    for condition in conditions {
        report.rows.push(run_trial_eval(
            &trials,
            &setup,
            condition,
            cfg.run.seed,
            &label,
            &mut cache,
        )?);
    }
    let report_csv = out_dir.join("reports").join(format!("eval_{label}.csv"));
    write_text(&report_csv, &report.to_csv())?;
    echo_config(cfg, out_dir, &format!("evaluate_{label}"))?;
    Ok(EvaluateArtifacts { report, report_csv })
}

// ── diagnose ─────────────────────────────────────────────────────────

pub struct DiagnoseSummary {
    pub target_speaker: usize,
    pub d_max_abs: f64,
    pub p_sum: f64,
    pub p_max_dev_from_uniform: f64,
    pub grid: (usize, usize),
    pub losses: Vec<(String, f64)>,
    pub files: Vec<PathBuf>,
}

/// Dumps the loss pipeline's view of one (clean, noisy) pair: X, E, M, the
/// channel-mean activation maps, D and P as CSV grids and PGM heatmaps,
/// plus the loss value of every variant. The target logit is the model's
/// own prediction on the clean side.
pub fn diagnose(
    speaker: &SpeakerNet,
    enhancer: &dyn MaskEstimator,
    clean: &Waveform,
    noisy: &Waveform,
    mel: &crate::dsp::MelConfig,
    dir: &Path,
) -> Result<DiagnoseSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clean_fm = mel_features(clean, mel)?;
    let noisy_fm = mel_features(noisy, mel)?;
    let frames = clean_fm.frames().min(noisy_fm.frames());
    let clean_fm = clean_fm.crop(0, frames)?;
    let noisy_fm = noisy_fm.crop(0, frames)?;
    let target = speaker.classify(&clean_fm)?;

    let mask_values = enhancer.mask_values(&noisy_fm)?;
    let mask = Mask::from_values(mask_values.clone(), frames, noisy_fm.bins())?;

    let mut files = Vec::new();
    let mut dump = |name: &str, values: &[f64], rows: usize, cols: usize| -> Result<()> {
        let csv = dir.join(format!("{name}.csv"));
        write_csv_grid(&csv, values, rows, cols)?;
        let pgm = dir.join(format!("{name}.pgm"));
        write_pgm(&pgm, values, rows, cols)?;
        files.push(csv);
        files.push(pgm);
        Ok(())
    };
    let bins = noisy_fm.bins();
    dump("x", noisy_fm.values(), frames, bins)?;
    dump("m", &mask_values, frames, bins)?;
    let enhanced: Vec<f64> = noisy_fm
        .values()
        .iter()
        .zip(&mask_values)
        .map(|(x, m)| x * m)
        .collect();
    dump("e", &enhanced, frames, bins)?;

    // grad-w view of the pair
    let tape = Tape::new(speaker.precision());
    let e = enhance(&tape, &noisy_fm, &mask)?;
    let out = compose_loss(&tape, speaker, &clean_fm, &e, target, LossVariant::GradW)?;
    let (a_ref, t_a, f_a) = out.a_ref_mean.clone();
    dump("a_ref", &a_ref, t_a, f_a)?;
    let (a_enh, ..) = out.a_enh_mean.clone();
    dump("a_enh", &a_enh, t_a, f_a)?;
    let d = out.d.as_ref().unwrap();
    dump("d", &d.values, d.grid.0, d.grid.1)?;
    let p = out.p.as_ref().unwrap();
    dump("p", &p.values, p.grid.0, p.grid.1)?;

    let mut losses = vec![(LossVariant::GradW.name().to_string(), out.loss.item())];
    for variant in ALL_VARIANTS {
        if variant == LossVariant::GradW {
            continue;
        }
        let tape = Tape::new(speaker.precision());
        let e = enhance(&tape, &noisy_fm, &mask)?;
        // a constant distance map makes min-max normalization degenerate;
        // report NaN for that variant instead of failing the whole dump
        let value = match compose_loss(&tape, speaker, &clean_fm, &e, target, variant) {
            Ok(v) => v.loss.item(),
            Err(Error::InvalidArgument { op: "weight_map", .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        losses.push((variant.name().to_string(), value));
    }
    let mut summary = format!("target_speaker={target}\nframes={frames}\nbins={bins}\n");
    for (name, value) in &losses {
        summary.push_str(&format!("loss.{name}={value:.9e}\n"));
    }
    let summary_path = dir.join("summary.txt");
    write_text(&summary_path, &summary)?;
    files.push(summary_path);

    let n = p.values.len() as f64;
    let uniform = 1.0 / n;
    Ok(DiagnoseSummary {
        target_speaker: target,
        d_max_abs: d.values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        p_sum: p.values.iter().sum(),
        p_max_dev_from_uniform: p
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max((v - uniform).abs())),
        grid: d.grid,
        losses,
        files,
    })
}

pub fn cmd_diagnose(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    clean_wav: &Path,
    noisy_wav: &Path,
    speaker_ckpt: &Path,
    enhancer_ckpt: &Path,
) -> Result<DiagnoseSummary> {
    ensure_layout(out_dir)?;
    let speaker = load_speaker(cfg, speaker_ckpt)?;
    let unet = load_unet(cfg, enhancer_ckpt)?;
    let clean = read_wav(clean_wav)?;
    let noisy = read_wav(noisy_wav)?;
    let summary = diagnose(
        &speaker,
        &unet,
        &clean,
        &noisy,
        &cfg.mel,
        &out_dir.join("diagnostics"),
    )?;
    echo_config(cfg, out_dir, "diagnose")?;
    Ok(summary)
}

/// The noisy features for one synthetic evaluation utterance; test and
/// example support for building diagnose inputs.
pub fn synth_noisy_pair(
    cfg: &ExperimentConfig,
    speaker: u64,
    utt_seed: u64,
    snr_db: f64,
    noise_seed: u64,
) -> Result<(Waveform, Waveform)> {
    let sr = cfg.mel.sample_rate;
    let clean = synth_utterance(speaker, cfg.data.utterance_seconds, utt_seed, sr);
    let noise = synth_noise(cfg.eval.noise_kind, cfg.data.utterance_seconds, noise_seed, sr);
    let mix = crate::dsp::mix_at_snr(&clean, &noise, snr_db)?;
    Ok((clean.scaled(mix.peak_gain), mix.mixture))
}

/// Reads a feature map CSV written by `diagnose`; test support.
pub fn read_csv_grid(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for line in text.lines() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad csv value `{s}`"))))
            .collect::<Result<_>>()?;
        if rows == 0 {
            cols = row.len();
        }
        rows += 1;
        values.extend(row);
    }
    Ok((values, rows, cols))
}
