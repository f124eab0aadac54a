//! Integration tests over the full pipeline at miniature scale: corpus
//! synthesis, pretraining, enhancement training, trial evaluation,
//! checkpointing and diagnostics.

mod common;

use std::path::PathBuf;

use once_cell::sync::Lazy;

use gradw::checkpoint::{decode, encode, read_checkpoint};
use gradw::config::ExperimentConfig;
use gradw::dsp::{mel_features, mix_at_snr, synth_noise, synth_utterance, MelConfig, NoiseKind};
use gradw::loss::LossVariant;
use gradw::metrics::{
    cosine_score, generate_trials, run_trial_eval, Condition, EmbedCache, EvalSetup,
};
use gradw::runner;
use gradw::speaker::{SpeakerNet, SpeakerNetConfig};
use gradw::tensor::Precision;
use gradw::train::{
    pretrain_speaker, train_enhancer, AugmentPolicy, Corpus, PretrainConfig, TrainConfig,
    Utterance,
};
use gradw::unet::{IdentityMask, MaskEstimator, UNet, UNetConfig};

const MINI_SR: u32 = 16_000;
const MINI_SPEAKERS: usize = 4;
const MINI_UTTS: usize = 6;
const MINI_SECONDS: f64 = 0.8;

fn mini_mel() -> MelConfig {
    MelConfig::default()
}

fn mini_corpus() -> Corpus {
    let mut utterances = Vec::new();
    for s in 0..MINI_SPEAKERS {
        for u in 0..MINI_UTTS {
            utterances.push(Utterance {
                id: format!("spk{s}_utt{u:03}"),
                speaker_id: s,
                waveform: synth_utterance(s as u64, MINI_SECONDS, u as u64, MINI_SR),
            });
        }
    }
    Corpus {
        utterances,
        num_speakers: MINI_SPEAKERS,
    }
}

fn mini_speaker_config() -> SpeakerNetConfig {
    SpeakerNetConfig {
        first_conv_channels: 4,
        block_depths: [2, 2, 2, 2],
        embedding_dim: 16,
        num_speakers: MINI_SPEAKERS,
        mel_bins: 24,
    }
}

fn mini_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 8,
        batch_size: 4,
        learning_rate: 2e-3,
        warmup_epochs: 1,
        crop_frames: 64,
        ..PretrainConfig::default()
    }
}

/// Shared frozen speaker model, pretrained once on the mini corpus.
static MINI_SPEAKER: Lazy<SpeakerNet> = Lazy::new(|| {
    let out = pretrain_speaker(
        &mini_speaker_config(),
        &mini_corpus(),
        &AugmentPolicy::default(),
        &mini_pretrain_config(),
        &mini_mel(),
        7,
        Precision::F32,
    )
    .expect("mini pretraining");
    out.model
});

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gradw_test_{name}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn pretrained_embeddings_cluster_by_speaker() {
    let model = &*MINI_SPEAKER;
    let mel = mini_mel();
    // fresh utterance seeds, unseen during pretraining
    let mut by_speaker: Vec<Vec<Vec<f64>>> = Vec::new();
    for s in 0..MINI_SPEAKERS as u64 {
        let mut embeds = Vec::new();
        for seed in 100..103u64 {
            let w = synth_utterance(s, MINI_SECONDS, seed, MINI_SR);
            let fm = mel_features(&w, &mel).unwrap();
            embeds.push(model.embed(&fm).unwrap());
        }
        by_speaker.push(embeds);
    }
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for a in 0..MINI_SPEAKERS {
        for b in a..MINI_SPEAKERS {
            for i in 0..3 {
                for j in 0..3 {
                    if a == b && i >= j {
                        continue;
                    }
                    let c = cosine_score(&by_speaker[a][i], &by_speaker[b][j]).unwrap();
                    if a == b {
                        same.push(c);
                    } else {
                        cross.push(c);
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&same) > mean(&cross),
        "same-speaker cosine {:.3} should exceed cross-speaker {:.3}",
        mean(&same),
        mean(&cross)
    );
}

#[test]
fn pretraining_is_deterministic_and_freezes() {
    let run = || {
        pretrain_speaker(
            &mini_speaker_config(),
            &mini_corpus(),
            &AugmentPolicy::default(),
            &PretrainConfig {
                epochs: 2,
                ..mini_pretrain_config()
            },
            &mini_mel(),
            13,
            Precision::F32,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.model.frozen());
    assert_eq!(a.model.params.snapshot_bits(), b.model.params.snapshot_bits());
    assert!(a.log.content_eq(&b.log));
    // single-speaker corpus rejected
    let mut solo = mini_corpus();
    solo.utterances.retain(|u| u.speaker_id == 0);
    assert!(pretrain_speaker(
        &mini_speaker_config(),
        &solo,
        &AugmentPolicy::default(),
        &mini_pretrain_config(),
        &mini_mel(),
        0,
        Precision::F32,
    )
    .is_err());
}

fn mini_train_config(variant: LossVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_epochs: 1,
        crop_frames: 48,
        holdout_speakers: 1,
        variant,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn enhancement_training_leaves_frozen_speaker_bit_identical() {
    let speaker = &*MINI_SPEAKER;
    let before = speaker.params.snapshot_bits();
    let mut unet = UNet::new(
        UNetConfig {
            first_conv_channels: 4,
            ..UNetConfig::default()
        },
        3,
        Precision::F32,
    )
    .unwrap();
    let corpus = mini_corpus();
    let cfg = mini_train_config(LossVariant::GradW, 5);
    let out = train_enhancer(&mut unet, speaker, &corpus, &cfg, &mini_mel(), None, "t").unwrap();
    assert_eq!(out.log.records.len(), 2);
    assert_eq!(speaker.params.snapshot_bits(), before);
    assert!(out.log.records.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn enhancement_training_is_deterministic() {
    let speaker = &*MINI_SPEAKER;
    let corpus = mini_corpus();
    let run = |seed: u64| {
        let mut unet = UNet::new(
            UNetConfig {
                first_conv_channels: 4,
                ..UNetConfig::default()
            },
            seed,
            Precision::F32,
        )
        .unwrap();
        let cfg = mini_train_config(LossVariant::EqualW, seed);
        let log = train_enhancer(&mut unet, speaker, &corpus, &cfg, &mini_mel(), None, "t")
            .unwrap()
            .log;
        (log, unet.params.snapshot_bits())
    };
    let (log_a, bits_a) = run(9);
    let (log_b, bits_b) = run(9);
    assert!(log_a.content_eq(&log_b));
    assert_eq!(bits_a, bits_b);
}

#[test]
fn speaker_and_corpus_class_mismatch_rejected() {
    let speaker = &*MINI_SPEAKER;
    let mut corpus = mini_corpus();
    corpus.utterances.push(Utterance {
        id: "spk9_utt0".into(),
        speaker_id: 9,
        waveform: synth_utterance(9, MINI_SECONDS, 0, MINI_SR),
    });
    corpus.num_speakers = 10;
    let mut unet = UNet::new(
        UNetConfig {
            first_conv_channels: 4,
            ..UNetConfig::default()
        },
        3,
        Precision::F32,
    )
    .unwrap();
    let cfg = mini_train_config(LossVariant::GradW, 5);
    assert!(
        train_enhancer(&mut unet, speaker, &corpus, &cfg, &mini_mel(), None, "t").is_err()
    );
}

#[test]
fn checkpoint_round_trip_preserves_model_outputs() {
    let speaker = &*MINI_SPEAKER;
    let bytes = encode(&speaker.to_checkpoint());
    let restored = SpeakerNet::from_checkpoint(&decode(&bytes).unwrap(), Precision::F32).unwrap();
    assert!(restored.frozen());
    let w = synth_utterance(2, MINI_SECONDS, 55, MINI_SR);
    let fm = mel_features(&w, &mini_mel()).unwrap();
    let a = speaker.embed(&fm).unwrap();
    let b = restored.embed(&fm).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }

    let unet = UNet::new(
        UNetConfig {
            first_conv_channels: 4,
            ..UNetConfig::default()
        },
        3,
        Precision::F32,
    )
    .unwrap();
    let bytes = encode(&unet.to_checkpoint());
    let restored = UNet::from_checkpoint(&decode(&bytes).unwrap(), Precision::F32).unwrap();
    let mask_a = unet.mask_values(&fm).unwrap();
    let mask_b = restored.mask_values(&fm).unwrap();
    assert_eq!(mask_a, mask_b);
}

#[test]
fn noisy_baseline_equals_identity_mask_stub_on_clean_condition() {
    let speaker = &*MINI_SPEAKER;
    let mel = mini_mel();
    let trials = generate_trials(&[0, 1, 2, 3], 12, 3, 20_000).unwrap();
    let run = |enhancer: Option<&dyn MaskEstimator>| {
        let setup = EvalSetup {
            speaker,
            enhancer,
            noise_kind: NoiseKind::White,
            mel: &mel,
            utterance_seconds: MINI_SECONDS,
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        };
        let mut cache = EmbedCache::default();
        run_trial_eval(&trials, &setup, Condition::Clean, 3, "x", &mut cache).unwrap()
    };
    let baseline = run(None);
    let stub = IdentityMask;
    let stubbed = run(Some(&stub));
    assert_eq!(baseline.eer.to_bits(), stubbed.eer.to_bits());
    assert_eq!(baseline.min_dcf.to_bits(), stubbed.min_dcf.to_bits());
}

#[test]
fn eer_and_mindcf_match_brute_force_oracle() {
    let n_sets = 120;
    let sizes = [4usize, 9, 20, 57, 120];
    let mut checked = 0;
    for i in 0..n_sets {
        let size = sizes[i % sizes.len()];
        let (scores, labels) = common::random_score_set(i as u64, size);
        let (eer, _) = gradw::metrics::compute_eer(&scores, &labels).unwrap();
        let dcf = gradw::metrics::compute_min_dcf(&scores, &labels, 0.01, 1.0, 1.0).unwrap();
        let (eer_bf, dcf_bf) = common::brute_force_metrics(&scores, &labels, 0.01, 1.0, 1.0);
        assert!(
            (eer - eer_bf).abs() < 1e-9,
            "set {i}: eer {eer} vs brute force {eer_bf}"
        );
        assert!(
            (dcf - dcf_bf).abs() < 1e-9,
            "set {i}: minDCF {dcf} vs brute force {dcf_bf}"
        );
        checked += 1;
    }
    assert_eq!(checked, n_sets);
}

#[test]
fn synth_data_writes_expected_counts_and_is_idempotent() {
    let dir = tmp_dir("synth");
    let mut cfg = ExperimentConfig::default();
    cfg.run.seed = 21;
    cfg.data.num_speakers = 2;
    cfg.data.utterances_per_speaker = 3;
    cfg.data.noise_clips = 4;
    cfg.data.utterance_seconds = 0.3;
    cfg.data.noise_seconds = 0.3;
    let manifest = runner::cmd_synth_data(&cfg, &dir).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2 * 3 + 4);
    let wavs = std::fs::read_dir(dir.join("manifests").join("wav")).unwrap().count();
    assert_eq!(wavs, 10);

    let bytes_a = std::fs::read(&manifest).unwrap();
    runner::cmd_synth_data(&cfg, &dir).unwrap();
    let bytes_b = std::fs::read(&manifest).unwrap();
    assert_eq!(bytes_a, bytes_b);

    // config echo reparses to an equal config
    let echo = std::fs::read_to_string(dir.join("config_synth_data.cfg")).unwrap();
    assert_eq!(ExperimentConfig::parse(&echo).unwrap(), cfg);

    // loadable corpus
    let corpus = runner::load_corpus(&manifest).unwrap();
    assert_eq!(corpus.utterances.len(), 6);
    assert_eq!(corpus.num_speakers, 2);
}

#[test]
fn diagnose_identity_pair_gives_zero_distance_and_uniform_weights() {
    let speaker = &*MINI_SPEAKER;
    let dir = tmp_dir("diagnose");
    let clean = synth_utterance(1, MINI_SECONDS, 77, MINI_SR);
    let stub = IdentityMask;
    let summary =
        runner::diagnose(speaker, &stub, &clean, &clean, &mini_mel(), &dir).unwrap();
    assert!(
        summary.d_max_abs < 1e-4,
        "max |D| = {} for identical inputs",
        summary.d_max_abs
    );
    assert!(
        summary.p_max_dev_from_uniform < 1e-3,
        "P deviates from uniform by {}",
        summary.p_max_dev_from_uniform
    );
    assert!((summary.p_sum - 1.0).abs() < 1e-6);
    assert_eq!(summary.losses.len(), 8);

    // PGM dimensions equal the grids they were written from
    let fm = mel_features(&clean, &mini_mel()).unwrap();
    let x_pgm = std::fs::read(dir.join("x.pgm")).unwrap();
    assert_eq!(
        gradw::report::pgm_dims(&x_pgm),
        Some((fm.frames(), fm.bins()))
    );
    let d_pgm = std::fs::read(dir.join("d.pgm")).unwrap();
    assert_eq!(gradw::report::pgm_dims(&d_pgm), Some(summary.grid));

    // the weight CSV sums to 1
    let (p_values, rows, cols) = runner::read_csv_grid(&dir.join("p.csv")).unwrap();
    assert_eq!((rows, cols), summary.grid);
    assert!((p_values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn evaluate_snr_sweep_mirrors_condition_grid() {
    let dir = tmp_dir("evalsweep");
    let mut cfg = ExperimentConfig::default();
    cfg.run.seed = 5;
    cfg.data.num_speakers = MINI_SPEAKERS;
    cfg.data.utterances_per_speaker = MINI_UTTS;
    cfg.data.utterance_seconds = MINI_SECONDS;
    cfg.eval.n_trials = 8;
    runner::ensure_layout(&dir).unwrap();
    gradw::checkpoint::write_checkpoint(
        &runner::speaker_checkpoint_path(&dir),
        &MINI_SPEAKER.to_checkpoint(),
    )
    .unwrap();
    // speaker config in the checkpoint wins over cfg defaults
    let conditions: Vec<Condition> = "-15,-10,-5,0,5,10,15,clean"
        .split(',')
        .map(|t| t.parse().unwrap())
        .collect();
    let art = runner::cmd_evaluate(&cfg, &dir, Some(conditions), None, None, None).unwrap();
    assert_eq!(art.report.rows.len(), 8);
    assert_eq!(art.report.rows[7].condition, Condition::Clean);
    assert!(art.report.rows.iter().all(|r| r.variant == "noisy"));
    let csv = std::fs::read_to_string(&art.report_csv).unwrap();
    assert!(csv.starts_with("condition,variant,eer,min_dcf,n_trials,seed\n"));
    assert_eq!(csv.lines().count(), 9);

    // reruns are byte-identical
    let again = runner::cmd_evaluate(
        &cfg,
        &dir,
        Some("-15,-10,-5,0,5,10,15,clean".split(',').map(|t| t.parse().unwrap()).collect()),
        None,
        None,
        None,
    )
    .unwrap();
    assert_eq!(
        std::fs::read(&art.report_csv).unwrap(),
        std::fs::read(&again.report_csv).unwrap()
    );
}

#[test]
fn checkpoint_files_round_trip_through_disk() {
    let dir = tmp_dir("ckptdisk");
    let path = dir.join("speaker.ckpt");
    gradw::checkpoint::write_checkpoint(&path, &MINI_SPEAKER.to_checkpoint()).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.kind, "speaker");
    let restored = SpeakerNet::from_checkpoint(&back, Precision::F32).unwrap();
    assert_eq!(
        restored.params.snapshot_bits(),
        MINI_SPEAKER.params.snapshot_bits()
    );
}

#[test]
fn mixing_then_features_keeps_training_pair_aligned() {
    // the peak-normalization gain reported by the mixer keeps the clean
    // reference aligned with the mixture
    let clean = synth_utterance(0, 0.5, 1, MINI_SR);
    let noise = synth_noise(NoiseKind::White, 0.5, 2, MINI_SR);
    let mix = mix_at_snr(&clean, &noise, -10.0).unwrap();
    assert!(mix.peak_gain <= 1.0);
    let mel = mini_mel();
    let r = mel_features(&clean.scaled(mix.peak_gain), &mel).unwrap();
    let x = mel_features(&mix.mixture, &mel).unwrap();
    assert_eq!(r.frames(), x.frames());
}
