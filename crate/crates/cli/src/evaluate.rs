use std::path::Path;

use anyhow::{Context, Result};
use floodgtn::models::Model;
use floodgtn::train::{report, TrainOutcome, TrainedModel};

use crate::artifacts::{checkpoint_path, load_config, read_timings, write, write_manifest};

pub fn run(config: &Path) -> Result<()> {
    let (cfg, bytes) = load_config(config)?;
    let data = cfg.dataset()?;
    let out = &cfg.output_dir;
    let mut models = Vec::new();
    for &arch in &cfg.models {
        for &arm in &cfg.arms {
            let path = checkpoint_path(out, arch, arm);
            if !path.is_file() {
                anyhow::bail!("missing checkpoint {} (run `floodgtn train` first)", path.display());
            }
            let (model, _) = Model::load_expecting(&path, &cfg.model_config(arch, arm))
                .with_context(|| format!("loading {}", path.display()))?;
            models.push(TrainedModel {
                arm,
                model,
                outcome: TrainOutcome {
                    history: Vec::new(),
                    best_epoch: 0,
                    train_seconds: 0.0,
                },
            });
        }
    }
    let timings = read_timings(out)?;
    let rep = report(&models, &data.test, &timings)?;

    let files = [
        (out.join("report.csv"), rep.to_csv()),
        (out.join("report.txt"), rep.to_table()),
        (out.join("per_step.csv"), rep.per_step_csv()),
    ];
    for (path, text) in &files {
        write(path, text)?;
    }
    print!("{}", rep.to_table());
    let paths: Vec<_> = files.into_iter().map(|(p, _)| p).collect();
    write_manifest(out, "evaluate", &bytes, cfg.seed, &paths)
}
