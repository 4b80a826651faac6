//! Output layout and run manifests shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use floodgtn::experiment::ExperimentConfig;
use floodgtn::models::Architecture;
use floodgtn::train::{Arm, Timing};
use floodgtn::Error;
use serde_json::json;
use sha2::{Digest, Sha256};

pub const TIMING_FILE: &str = "timing.csv";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads an experiment config; an unreadable file is a configuration error.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::load(path)?;
    Ok((cfg, bytes))
}

pub fn checkpoint_path(out: &Path, arch: Architecture, arm: Arm) -> PathBuf {
    out.join("checkpoints").join(format!("{arch}.{arm}.ckpt"))
}

pub fn history_path(out: &Path, arch: Architecture, arm: Arm) -> PathBuf {
    out.join("history").join(format!("{arch}.{arm}.csv"))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `<out>/<command>.manifest.json`: the config digest, seed and artifact list.
/// Contains nothing run-dependent, so identical inputs give identical bytes.
pub fn write_manifest(out: &Path, command: &str, config_bytes: &[u8], seed: u64, artifacts: &[PathBuf]) -> Result<()> {
    let rel: Vec<String> = artifacts
        .iter()
        .map(|p| p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/"))
        .collect();
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(config_bytes),
        "seed": seed,
        "artifacts": rel,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write(&out.join(format!("{command}.manifest.json")), text)
}

pub fn timing_csv(timings: &[Timing]) -> String {
    let mut out = String::from("model,arm,train_s,predict_s\n");
    for t in timings {
        out.push_str(&format!("{},{},{},{}\n", t.model, t.arm, t.train_s, t.predict_s));
    }
    out
}

/// Reads the timings recorded by `train`; absent file means no timings.
pub fn read_timings(out: &Path) -> Result<Vec<Timing>> {
    let path = out.join(TIMING_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut timings = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        let bad = || Error::Parse {
            path: path.clone(),
            message: format!("malformed timing row `{}`", rec.iter().collect::<Vec<_>>().join(",")),
        };
        if rec.len() != 4 {
            return Err(bad().into());
        }
        timings.push(Timing {
            model: Architecture::parse(&rec[0]).ok_or_else(bad)?,
            arm: Arm::parse(&rec[1]).ok_or_else(bad)?,
            train_s: rec[2].parse().map_err(|_| bad())?,
            predict_s: rec[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(timings)
}
