//! Thin command-line entry point over the library runner: corpus
//! synthesis, speaker pretraining, enhancement training across loss
//! variants, SNR-swept evaluation, and gradient/weight-map diagnostics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradw::config::ExperimentConfig;
use gradw::error::Result;
use gradw::loss::LossVariant;
use gradw::metrics::Condition;
use gradw::runner;
use gradw::tensor::Precision;

#[derive(Parser)]
#[command(
    name = "gradw",
    about = "Gradient-weighted feature-domain speech enhancement toolkit",
    version
)]
struct Cli {
    /// Experiment configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// 64-bit verification precision.
    #[arg(long = "f64", global = true)]
    f64_mode: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the deterministic corpus (speakers + noise pool).
    SynthData,
    /// Pretrain and freeze the speaker classifier.
    Pretrain,
    /// Train the masking network against the frozen speaker model.
    TrainEnh {
        /// Loss variant: grad_w, equal_w, clean_w, res_w, no_softmax,
        /// channel, residual, both.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Verification metrics over synthetic trials per SNR condition.
    Evaluate {
        /// Comma-separated dB values and/or the token `clean`.
        #[arg(long)]
        snr_list: Option<String>,
        /// Enhancer checkpoint; omitted = the noisy baseline.
        #[arg(long)]
        enhancer: Option<PathBuf>,
        /// Row label in the report (defaults to the checkpoint stem).
        #[arg(long)]
        label: Option<String>,
        /// Trial list file ("label enroll_id test_id" lines).
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Dump feature, mask, activation, distance and weight maps for one
    /// (clean, noisy) WAV pair.
    Diagnose {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// Speaker checkpoint (default: <out>/checkpoints/speaker.ckpt).
        #[arg(long)]
        speaker_ckpt: Option<PathBuf>,
        #[arg(long)]
        enhancer_ckpt: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if cli.f64_mode {
        cfg.run.precision = Precision::F64;
    }
    let out = &cli.out;

    match cli.command {
        Command::SynthData => {
            let manifest = runner::cmd_synth_data(&cfg, out)?;
            println!(
                "wrote {} utterances and {} noise clips; manifest at {}",
                cfg.data.num_speakers * cfg.data.utterances_per_speaker,
                cfg.data.noise_clips,
                manifest.display()
            );
        }
        Command::Pretrain => {
            let art = runner::cmd_pretrain(&cfg, out)?;
            println!(
                "pretrained speaker model: train accuracy {:.3}, checkpoint {}",
                art.train_accuracy,
                art.checkpoint.display()
            );
        }
        Command::TrainEnh { variant } => {
            let variant = variant.map(|v| v.parse::<LossVariant>()).transpose()?;
            let art = runner::cmd_train_enh(&cfg, out, variant)?;
            let last = art.output.log.records.last().expect("at least one epoch");
            println!(
                "trained enhancer: final train loss {:.4}, best epoch {}, checkpoint {}",
                last.train_loss,
                art.output.best_epoch,
                art.best_checkpoint.display()
            );
        }
        Command::Evaluate {
            snr_list,
            enhancer,
            label,
            trials,
        } => {
            let conditions = snr_list
                .map(|s| {
                    s.split(',')
                        .map(|tok| tok.trim().parse::<Condition>())
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            let art = runner::cmd_evaluate(
                &cfg,
                out,
                conditions,
                enhancer.as_deref(),
                label.as_deref(),
                trials.as_deref(),
            )?;
            print!("{}", art.report.to_csv());
            println!("report written to {}", art.report_csv.display());
        }
        Command::Diagnose {
            clean,
            noisy,
            speaker_ckpt,
            enhancer_ckpt,
        } => {
            let speaker_ckpt =
                speaker_ckpt.unwrap_or_else(|| runner::speaker_checkpoint_path(out));
            let summary =
                runner::cmd_diagnose(&cfg, out, &clean, &noisy, &speaker_ckpt, &enhancer_ckpt)?;
            println!(
                "diagnostics for target speaker {} written ({} files); max |D| = {:.3e}",
                summary.target_speaker,
                summary.files.len(),
                summary.d_max_abs
            );
            for (name, value) in &summary.losses {
                println!("loss.{name} = {value:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
