use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use floodgtn::train::{time_prediction, train_arm, Timing, TIMING_RUNS};
use serde_json::json;

use crate::artifacts::{checkpoint_path, history_path, load_config, timing_csv, write, write_manifest, TIMING_FILE};

pub fn run(config: &Path) -> Result<()> {
    let (cfg, bytes) = load_config(config)?;
    let data = cfg.dataset()?;
    let out = &cfg.output_dir;
    let mut artifacts = Vec::new();
    let mut timings = Vec::new();
    for &arch in &cfg.models {
        for &arm in &cfg.arms {
            let trained = train_arm(&cfg, &data, arch, arm).with_context(|| format!("training {arch} ({arm})"))?;
            let ckpt = checkpoint_path(out, arch, arm);
            write(
                &ckpt,
                trained.model.to_bytes(json!({
                    "arm": arm,
                    "best_epoch": trained.outcome.best_epoch,
                    "config_seed": cfg.seed,
                })),
            )?;
            let mut hist = String::from("epoch,train_loss,val_mae_ft\n");
            for r in &trained.outcome.history {
                let val = r.val_mae.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(hist, "{},{},{val}", r.epoch, r.train_loss);
            }
            let hpath = history_path(out, arch, arm);
            write(&hpath, hist)?;
            timings.push(Timing {
                model: arch,
                arm,
                train_s: trained.outcome.train_seconds,
                predict_s: time_prediction(&trained.model, &data.test, TIMING_RUNS)?,
            });
            eprintln!(
                "{arch} ({arm}): best epoch {}, {:.1} s",
                trained.outcome.best_epoch, trained.outcome.train_seconds
            );
            artifacts.extend([ckpt, hpath]);
        }
    }
    // wall-clock timings are the one non-reproducible output, kept apart
    write(&out.join(TIMING_FILE), timing_csv(&timings))?;
    write_manifest(out, "train", &bytes, cfg.seed, &artifacts)
}
