use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use chrono::Duration;
use floodgtn::data::format_timestamp;
use floodgtn::models::Model;
use floodgtn::train::Arm;
use floodgtn::Error;

use crate::artifacts::{checkpoint_path, load_config, write, write_manifest};

/// Long format `timestamp,station,series,value_ft`: `OBS` for the observed
/// level and one series per model for its forecast issued `lead` hours earlier.
pub fn run(config: &Path, lead: Option<usize>, arm: &str, out: Option<&Path>) -> Result<()> {
    let (cfg, bytes) = load_config(config)?;
    let arm = Arm::parse(arm).ok_or_else(|| Error::InvalidConfig(format!("unknown arm `{arm}`")))?;
    let lead = lead.unwrap_or(cfg.k);
    if lead == 0 || lead > cfg.k {
        return Err(Error::InvalidConfig(format!("lead {lead} not in 1..={}", cfg.k)).into());
    }
    let data = cfg.dataset()?;
    let targets = &data.layout.target_ids;

    // (timestamp, station, series) keeps the output sorted and one row per key
    let mut rows: BTreeMap<(String, usize, String), f64> = BTreeMap::new();
    for s in &data.test {
        let ts = format_timestamp(&(s.anchor + Duration::hours(lead as i64)));
        for m in 0..targets.len() {
            rows.insert((ts.clone(), m, "OBS".into()), s.y_true.get(lead - 1, m));
        }
    }
    for &arch in &cfg.models {
        let path = checkpoint_path(&cfg.output_dir, arch, arm);
        if !path.is_file() {
            anyhow::bail!("missing checkpoint {} (run `floodgtn train` first)", path.display());
        }
        let (model, _) = Model::load_expecting(&path, &cfg.model_config(arch, arm))
            .with_context(|| format!("loading {}", path.display()))?;
        for s in &data.test {
            let y = model.forward(s)?.y_hat;
            let ts = format_timestamp(&(s.anchor + Duration::hours(lead as i64)));
            for m in 0..targets.len() {
                rows.insert((ts.clone(), m, arch.name().into()), y.get(lead - 1, m));
            }
        }
    }

    let mut text = String::from("timestamp,station,series,value_ft\n");
    for ((ts, m, series), v) in &rows {
        let _ = writeln!(text, "{ts},{},{series},{v}", targets[*m]);
    }
    let path = out.map_or_else(|| cfg.output_dir.join("plot_data.csv"), Path::to_path_buf);
    write(&path, text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    write_manifest(dir, "plot-data", &bytes, cfg.seed, std::slice::from_ref(&path))
}
