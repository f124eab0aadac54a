// Scratch calibration harness (temporary; replaced by the real examples).
use std::time::Instant;

use gradw::config::ExperimentConfig;
use gradw::loss::LossVariant;
use gradw::runner;

fn main() -> gradw::Result<()> {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.run.seed = 11;
    let dir = std::env::temp_dir().join("gradw_calibrate");
    std::fs::remove_dir_all(&dir).ok();

    let manifest = runner::cmd_synth_data(&cfg, &dir)?;
    println!("[{:>7.1?}] synth-data -> {}", t0.elapsed(), manifest.display());

    let pre = runner::cmd_pretrain(&cfg, &dir)?;
    println!(
        "[{:>7.1?}] pretrain accuracy = {:.3}",
        t0.elapsed(),
        pre.train_accuracy
    );

    for variant in [LossVariant::GradW, LossVariant::EqualW] {
        let art = runner::cmd_train_enh(&cfg, &dir, Some(variant))?;
        let first = &art.output.log.records[0];
        let last = art.output.log.records.last().unwrap();
        println!(
            "[{:>7.1?}] train {}: epoch1 loss {:.4} -> epoch{} loss {:.4} (ratio {:.3}), best epoch {}",
            t0.elapsed(),
            variant,
            first.train_loss,
            last.epoch + 1,
            last.train_loss,
            last.train_loss / first.train_loss,
            art.output.best_epoch
        );
    }

    for (enh, label) in [
        (None, "noisy"),
        (Some("grad_w_best.ckpt"), "grad_w"),
        (Some("equal_w_best.ckpt"), "equal_w"),
    ] {
        let path = enh.map(|f| dir.join("checkpoints").join(f));
        let art = runner::cmd_evaluate(&cfg, &dir, None, path.as_deref(), Some(label), None)?;
        for row in &art.report.rows {
            println!(
                "[{:>7.1?}] eval {} @ {:>5}: EER {:.4}  minDCF {:.4}",
                t0.elapsed(),
                label,
                row.condition.to_string(),
                row.eer,
                row.min_dcf
            );
        }
    }
    Ok(())
}
