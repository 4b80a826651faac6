use std::path::Path;

use anyhow::Result;
use floodgtn::data::{manifest_path_for, write_channel_manifest, write_frame};
use floodgtn::synth::{generate, ScenarioConfig};
use floodgtn::Error;

use crate::artifacts::{write, write_manifest};

pub fn run(scenario: &str, hours: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    if hours == Some(0) {
        return Err(Error::InvalidConfig("--hours must be positive".into()).into());
    }
    let mut cfg = match ScenarioConfig::named(scenario, hours.unwrap_or(4000), seed.unwrap_or(0)) {
        Some(c) => c,
        None => {
            let path = Path::new(scenario);
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("scenario `{scenario}`: {e}")))?;
            ScenarioConfig::from_toml(&text).map_err(|e| Error::Parse {
                path: path.into(),
                message: e.message().to_string(),
            })?
        }
    };
    if let Some(h) = hours {
        cfg.duration = h;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let frame = generate(&cfg)?;

    let data = out.join("data.csv");
    let channels = manifest_path_for(&data);
    let topology = out.join("topology.toml");
    let scenario_file = out.join("scenario.toml");
    std::fs::create_dir_all(out)?;
    write_frame(&frame, &data)?;
    write_channel_manifest(&channels, &frame.channels)?;
    write(&topology, cfg.topology.to_toml())?;
    // the resolved scenario is the config this run is reproducible from
    let resolved = cfg.to_toml();
    write(&scenario_file, &resolved)?;
    write_manifest(
        out,
        "generate",
        resolved.as_bytes(),
        cfg.seed,
        &[data, channels, topology, scenario_file],
    )
}
