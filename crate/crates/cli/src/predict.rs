use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use chrono::Duration;
use floodgtn::data::{format_timestamp, load_frame_with_channels, WindowedSample};
use floodgtn::models::Model;
use floodgtn::{Error, Tensor};

use crate::artifacts::{write, write_manifest};

/// `w` rows hold the last covariate values over the horizon; `w+k` rows
/// supply future covariates in the last `k` rows, whose level cells are
/// ignored.
fn window_sample(model: &Model, path: &Path) -> Result<WindowedSample> {
    let layout = model.layout();
    let frame = load_frame_with_channels(path, &layout.channels)?;
    let (w, k) = (model.config().w, model.config().k);
    let rows = frame.len();
    if rows != w && rows != w + k {
        return Err(Error::InvalidConfig(format!("window has {rows} rows; expected w={w} or w+k={}", w + k)).into());
    }
    let f = frame.channel_count();
    let x_past = Tensor::from_vec(w, f, frame.values.data()[..w * f].to_vec())?;
    let mut future = Tensor::zeros(k, layout.covariate_count());
    for j in 0..k {
        let src = if rows == w { w - 1 } else { w + j };
        for (c, &col) in layout.covariates.iter().enumerate() {
            future.set(j, c, frame.values.get(src, col));
        }
    }
    Ok(WindowedSample {
        x_past,
        x_cov_future: future,
        y_true: Tensor::zeros(k, layout.target_count()),
        anchor: frame.time_at(w - 1),
        anchor_index: w - 1,
    })
}

pub fn run(checkpoint: &Path, window: &Path, out: &Path) -> Result<()> {
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let (model, _) = Model::from_bytes(&bytes).with_context(|| format!("loading {}", checkpoint.display()))?;
    let sample = window_sample(&model, window)?;
    let forecast = model.forward(&sample)?;
    let layout = model.layout();

    let mut text = format!("timestamp,{}\n", layout.target_ids.join(","));
    for j in 0..forecast.y_hat.rows() {
        let t = sample.anchor + Duration::hours(j as i64 + 1);
        let vals: Vec<String> = forecast.y_hat.row(j).iter().map(f64::to_string).collect();
        let _ = writeln!(text, "{},{}", format_timestamp(&t), vals.join(","));
    }
    let forecast_path = out.join("forecast.csv");
    write(&forecast_path, text)?;
    let mut artifacts = vec![forecast_path];

    match model.extract_attention(&sample) {
        Ok(table) => {
            let mut text = format!("target,step,{}\n", table.channels.join(","));
            for (target, weights) in table.targets.iter().zip(&table.weights) {
                for j in 0..weights.rows() {
                    let vals: Vec<String> = weights.row(j).iter().map(f64::to_string).collect();
                    let _ = writeln!(text, "{target},{},{}", j + 1, vals.join(","));
                }
            }
            let path = out.join("attention.csv");
            write(&path, text)?;
            artifacts.push(path);
        }
        Err(Error::NotSupported(arch)) => eprintln!("note: no attention map for {arch}"),
        Err(e) => return Err(e.into()),
    }
    write_manifest(out, "predict", &bytes, model.config().seed, &artifacts)
}
