//! Hourly observation frames, windowed samples and per-channel scaling.
//!
//! On disk a frame is a CSV file
//!
//! ```text
//! timestamp,S1_level,R1_rain,...
//! 2020-01-01T00:00:00Z,1.25,0,...
//! ```
//!
//! with one row per hour (empty cell = missing) and a sidecar channel manifest
//! `<stem>.channels.csv` with header `channel,node_id,kind,unit`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeKind, StationGraph};
use crate::nn::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:00:00Z";
/// Longest run of missing hours that is filled by interpolation.
pub const MAX_INTERPOLATED_GAP: usize = 3;
/// Channels whose training std falls below this are constant for scaling
/// purposes: stored with std 0 and normalized to 0 regardless of value.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    WaterLevel,
    Rainfall,
    Tide,
    GateOpening,
    PumpFlow,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 5] = [
        ChannelKind::WaterLevel,
        ChannelKind::Rainfall,
        ChannelKind::Tide,
        ChannelKind::GateOpening,
        ChannelKind::PumpFlow,
    ];

    pub fn unit(self) -> &'static str {
        match self {
            ChannelKind::WaterLevel | ChannelKind::Tide => "ft",
            ChannelKind::Rainfall => "in/hr",
            ChannelKind::GateOpening => "1",
            ChannelKind::PumpFlow => "cfs",
        }
    }

    pub fn is_covariate(self) -> bool {
        self != ChannelKind::WaterLevel
    }

    /// Slot in the per-node kind vector used by node-structured models.
    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.to_string() == s)
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::WaterLevel => "water-level",
            ChannelKind::Rainfall => "rainfall",
            ChannelKind::Tide => "tide",
            ChannelKind::GateOpening => "gate-opening",
            ChannelKind::PumpFlow => "pump-flow",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub node: String,
    pub kind: ChannelKind,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, node: impl Into<String>, kind: ChannelKind) -> Self {
        ChannelSpec {
            name: name.into(),
            node: node.into(),
            kind,
        }
    }
}

/// Hourly multichannel observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub start: DateTime<Utc>,
    pub channels: Vec<ChannelSpec>,
    /// `T×F`, row per hour.
    pub values: Tensor,
    /// `T×F`, true where the value was missing and has been filled.
    pub missing: Vec<bool>,
}

impl TimeSeriesFrame {
    pub fn new(start: DateTime<Utc>, channels: Vec<ChannelSpec>, values: Tensor) -> Self {
        let missing = vec![false; values.len()];
        TimeSeriesFrame {
            start,
            channels,
            values,
            missing,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn time_at(&self, row: usize) -> DateTime<Utc> {
        self.start + Duration::hours(row as i64)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.channel_count() + col]
    }

    /// Rows `[start, end)` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeriesFrame {
        let f = self.channel_count();
        let data = self.values.data()[start * f..end * f].to_vec();
        TimeSeriesFrame {
            start: self.time_at(start),
            channels: self.channels.clone(),
            values: Tensor::from_vec(end - start, f, data).expect("slice shape"),
            missing: self.missing[start * f..end * f].to_vec(),
        }
    }
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ").ok()?;
    let t = naive.and_utc();
    // bit-exact: reject anything that does not re-render identically
    (format_timestamp(&t) == s).then_some(t)
}

/// `data.csv` → `data.channels.csv`.
pub fn manifest_path_for(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv.with_file_name(format!("{stem}.channels.csv"))
}

pub fn read_channel_manifest(path: &Path) -> Result<Vec<ChannelSpec>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["channel", "node_id", "kind", "unit"] {
        return Err(Error::Schema(format!(
            "{}: manifest header must be `channel,node_id,kind,unit`",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let kind =
            ChannelKind::parse(&rec[2]).ok_or_else(|| Error::Schema(format!("unknown channel kind `{}`", &rec[2])))?;
        if &rec[3] != kind.unit() {
            return Err(Error::Schema(format!(
                "channel `{}`: unit `{}` does not match kind {kind} (expected `{}`)",
                &rec[0],
                &rec[3],
                kind.unit()
            )));
        }
        out.push(ChannelSpec::new(&rec[0], &rec[1], kind));
    }
    Ok(out)
}

pub fn write_channel_manifest(path: &Path, channels: &[ChannelSpec]) -> Result<()> {
    let mut text = String::from("channel,node_id,kind,unit\n");
    for c in channels {
        text.push_str(&format!("{},{},{},{}\n", c.name, c.node, c.kind, c.kind.unit()));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads `path` and its sidecar manifest, checking every channel's node
/// against the graph.
pub fn load_frame(path: &Path, graph: &StationGraph) -> Result<TimeSeriesFrame> {
    let channels = read_channel_manifest(&manifest_path_for(path))?;
    for c in &channels {
        if graph.index_of(&c.node).is_none() {
            return Err(Error::UnknownNode {
                channel: c.name.clone(),
                node: c.node.clone(),
            });
        }
    }
    load_frame_with_channels(path, &channels)
}

/// Loads a frame whose columns must be exactly the given channels, in order.
pub fn load_frame_with_channels(path: &Path, channels: &[ChannelSpec]) -> Result<TimeSeriesFrame> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_frame(&text, channels).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_frame(text: &str, channels: &[ChannelSpec]) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    let expected: Vec<&str> = std::iter::once("timestamp")
        .chain(channels.iter().map(|c| c.name.as_str()))
        .collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema(format!("header must be `{}`", expected.join(","))));
    }

    let f = channels.len();
    let mut raw: Vec<f64> = Vec::new();
    let mut start = None;
    let mut prev: Option<DateTime<Utc>> = None;
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(e.to_string()))?;
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Schema(format!("row {}: bad timestamp `{}`", i + 1, &rec[0])))?;
        if let Some(p) = prev {
            if ts - p != Duration::hours(1) {
                return Err(Error::NonHourly {
                    row: i + 1,
                    prev: format_timestamp(&p),
                    next: format_timestamp(&ts),
                });
            }
        } else {
            start = Some(ts);
        }
        prev = Some(ts);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                raw.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Schema(format!(
                        "row {}: `{}` is not a number ({})",
                        i + 1,
                        cell,
                        channels[j].name
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Schema(format!("row {}: non-finite value", i + 1)));
                }
                raw.push(v);
            }
        }
        rows += 1;
    }
    let start = start.ok_or_else(|| Error::Schema("no data rows".into()))?;

    let missing: Vec<bool> = raw.iter().map(|v| v.is_nan()).collect();
    let mut values = Tensor::from_vec(rows, f, raw)?;
    for (j, ch) in channels.iter().enumerate() {
        fill_gaps(&mut values, j).map_err(|(row, hours)| match hours {
            0 => Error::Schema(format!("channel `{}` has no observations", ch.name)),
            h => Error::GapTooLong {
                channel: ch.name.clone(),
                hours: h,
                start: format_timestamp(&(start + Duration::hours(row as i64))),
            },
        })?;
    }
    Ok(TimeSeriesFrame {
        start,
        channels: channels.to_vec(),
        values,
        missing,
    })
}

/// Linear interpolation of interior NaN runs, nearest-value fill at the
/// edges. Errors with `(first_row, run_length)` when a run is too long, or
/// `(0, 0)` when the column is entirely missing.
fn fill_gaps(values: &mut Tensor, col: usize) -> std::result::Result<(), (usize, usize)> {
    let t = values.rows();
    let mut r = 0;
    let mut any = false;
    while r < t {
        if !values.get(r, col).is_nan() {
            any = true;
            r += 1;
            continue;
        }
        let run_start = r;
        while r < t && values.get(r, col).is_nan() {
            r += 1;
        }
        let run = r - run_start;
        if run > MAX_INTERPOLATED_GAP {
            return Err((run_start, run));
        }
        let before = run_start.checked_sub(1).map(|i| values.get(i, col));
        let after = (r < t).then(|| values.get(r, col));
        for (offset, row) in (run_start..r).enumerate() {
            let v = match (before, after) {
                (Some(a), Some(b)) => a + (b - a) * (offset + 1) as f64 / (run + 1) as f64,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => return Err((0, 0)),
            };
            values.set(row, col, v);
        }
    }
    if any {
        Ok(())
    } else {
        Err((0, 0))
    }
}

/// Writes the frame CSV plus its sidecar manifest. Missing cells stay empty.
pub fn write_frame(frame: &TimeSeriesFrame, path: &Path) -> Result<()> {
    std::fs::write(path, render_frame(frame)).map_err(|e| Error::io(path, e))?;
    write_channel_manifest(&manifest_path_for(path), &frame.channels)
}

pub fn render_frame(frame: &TimeSeriesFrame) -> String {
    let mut out = String::from("timestamp");
    for c in &frame.channels {
        out.push(',');
        out.push_str(&c.name);
    }
    out.push('\n');
    for r in 0..frame.len() {
        out.push_str(&format_timestamp(&frame.time_at(r)));
        for c in 0..frame.channel_count() {
            out.push(',');
            if !frame.is_missing(r, c) {
                out.push_str(&frame.values.get(r, c).to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// How frame channels map onto the graph: which columns are covariates,
/// which column feeds each target, and the node owning every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub channels: Vec<ChannelSpec>,
    pub node_ids: Vec<String>,
    pub target_ids: Vec<String>,
    /// Node index of each channel.
    pub channel_node: Vec<usize>,
    /// Frame column of each covariate, in frame order (`C` entries).
    pub covariates: Vec<usize>,
    /// Frame column holding each target's water level (`M` entries).
    pub targets: Vec<usize>,
    /// Node index of each target.
    pub target_nodes: Vec<usize>,
}

impl ChannelLayout {
    pub fn new(channels: &[ChannelSpec], graph: &StationGraph) -> Result<Self> {
        let mut channel_node = Vec::with_capacity(channels.len());
        for c in channels {
            let node = graph.index_of(&c.node).ok_or_else(|| Error::UnknownNode {
                channel: c.name.clone(),
                node: c.node.clone(),
            })?;
            if c.kind == ChannelKind::WaterLevel && graph.nodes()[node].kind != NodeKind::WaterLevelStation {
                return Err(Error::Schema(format!(
                    "water-level channel `{}` attached to non-station node `{}`",
                    c.name, c.node
                )));
            }
            channel_node.push(node);
        }
        let covariates = (0..channels.len())
            .filter(|&i| channels[i].kind.is_covariate())
            .collect();
        let mut targets = Vec::new();
        for (t, &node) in graph.targets().iter().zip(graph.target_indices()) {
            let cols: Vec<usize> = (0..channels.len())
                .filter(|&i| channel_node[i] == node && channels[i].kind == ChannelKind::WaterLevel)
                .collect();
            match cols.as_slice() {
                [one] => targets.push(*one),
                _ => {
                    return Err(Error::Schema(format!(
                        "target `{t}` needs exactly one water-level channel, found {}",
                        cols.len()
                    )))
                }
            }
        }
        Ok(ChannelLayout {
            channels: channels.to_vec(),
            node_ids: graph.nodes().iter().map(|n| n.id.clone()).collect(),
            target_ids: graph.targets().to_vec(),
            channel_node,
            covariates,
            targets,
            target_nodes: graph.target_indices().to_vec(),
        })
    }

    pub fn feature_count(&self) -> usize {
        self.channels.len()
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.len()
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }
}

/// One `(X_past, X_cov_future) -> Y` instance anchored at hour `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// `w×F`: all channels, hours `t-w+1..=t`.
    pub x_past: Tensor,
    /// `k×C`: covariates only, hours `t+1..=t+k`.
    pub x_cov_future: Tensor,
    /// `k×M`: target levels, hours `t+1..=t+k`.
    pub y_true: Tensor,
    pub anchor: DateTime<Utc>,
    /// Frame row of the anchor hour.
    pub anchor_index: usize,
}

impl WindowedSample {
    pub fn w(&self) -> usize {
        self.x_past.rows()
    }

    pub fn k(&self) -> usize {
        self.y_true.rows()
    }
}

/// Stride-1 windows in chronological anchor order; `T-w-k+1` of them.
pub fn sliding_windows(
    frame: &TimeSeriesFrame,
    w: usize,
    k: usize,
    graph: &StationGraph,
) -> Result<Vec<WindowedSample>> {
    let layout = ChannelLayout::new(&frame.channels, graph)?;
    windows_with_layout(frame, w, k, &layout)
}

pub fn windows_with_layout(
    frame: &TimeSeriesFrame,
    w: usize,
    k: usize,
    layout: &ChannelLayout,
) -> Result<Vec<WindowedSample>> {
    if w == 0 || k == 0 {
        return Err(Error::InvalidConfig("w and k must be at least 1".into()));
    }
    let t = frame.len();
    if t < w + k {
        return Err(Error::FrameTooShort { t, needed: w + k });
    }
    let f = frame.channel_count();
    let v = &frame.values;
    let out = (w - 1..t - k)
        .map(|anchor| {
            let past = v.data()[(anchor + 1 - w) * f..(anchor + 1) * f].to_vec();
            let mut cov = Vec::with_capacity(k * layout.covariates.len());
            let mut y = Vec::with_capacity(k * layout.targets.len());
            for r in anchor + 1..=anchor + k {
                cov.extend(layout.covariates.iter().map(|&c| v.get(r, c)));
                y.extend(layout.targets.iter().map(|&c| v.get(r, c)));
            }
            WindowedSample {
                x_past: Tensor::from_vec(w, f, past).expect("window shape"),
                x_cov_future: Tensor::from_vec(k, layout.covariates.len(), cov).expect("window shape"),
                y_true: Tensor::from_vec(k, layout.targets.len(), y).expect("window shape"),
                anchor: frame.time_at(anchor),
                anchor_index: anchor,
            }
        })
        .collect();
    Ok(out)
}

fn split_point(n: usize, ratio: f64) -> usize {
    // tolerate representation error such as 0.29 * 100 = 28.999...
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Chronological split at `floor(ratio·N)`. Training samples whose target
/// window reaches into the test period are dropped.
pub fn split_train_test(
    samples: Vec<WindowedSample>,
    ratio: f64,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} not in (0, 1)")));
    }
    let cut = split_point(samples.len(), ratio);
    let mut train = samples;
    let test = train.split_off(cut.min(train.len()));
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let first_forecast_hour = test[0].anchor_index + 1;
    train.retain(|s| s.anchor_index + s.k() < first_forecast_hour);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    Ok((train, test))
}

/// Per-channel z-score statistics fitted on training input rows. A std of 0
/// marks a channel constant over training; it normalizes to 0, so values
/// never seen in training cannot reach a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub covariates: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Scaler {
    /// Statistics over the distinct frame hours covered by the samples'
    /// `X_past` rows; overlapping windows do not weight hours twice.
    pub fn fit(train: &[WindowedSample], layout: &ChannelLayout) -> Result<Self> {
        let first = train.first().ok_or(Error::EmptySplit("train"))?;
        let f = first.x_past.cols();
        let w = first.w();
        let mut seen = HashSet::new();
        let mut sum = vec![0.0; f];
        let mut count = 0usize;
        let mut rows: Vec<&[f64]> = Vec::new();
        for s in train {
            for r in 0..w {
                let hour = s.anchor_index + 1 + r - w;
                if seen.insert(hour) {
                    let row = s.x_past.row(r);
                    for (acc, x) in sum.iter_mut().zip(row) {
                        *acc += x;
                    }
                    rows.push(row);
                    count += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; f];
        for row in rows {
            for ((acc, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let sd = (v / count as f64).sqrt();
                if sd < STD_FLOOR {
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Scaler {
            mean,
            std,
            covariates: layout.covariates.clone(),
            targets: layout.targets.clone(),
        })
    }

    fn apply_cols(&self, t: &mut Tensor, cols: &[usize], inverse: bool) {
        for r in 0..t.rows() {
            for (j, x) in t.row_mut(r).iter_mut().enumerate() {
                let c = cols[j];
                let sd = self.std[c];
                *x = match (inverse, sd == 0.0) {
                    (true, _) => *x * sd + self.mean[c],
                    (false, true) => 0.0,
                    (false, false) => (*x - self.mean[c]) / sd,
                };
            }
        }
    }

    pub fn transform(&self, s: &WindowedSample) -> WindowedSample {
        let mut out = s.clone();
        let all: Vec<usize> = (0..self.mean.len()).collect();
        self.apply_cols(&mut out.x_past, &all, false);
        self.apply_cols(&mut out.x_cov_future, &self.covariates, false);
        self.apply_cols(&mut out.y_true, &self.targets, false);
        out
    }

    pub fn inverse_transform(&self, s: &WindowedSample) -> WindowedSample {
        let mut out = s.clone();
        let all: Vec<usize> = (0..self.mean.len()).collect();
        self.apply_cols(&mut out.x_past, &all, true);
        self.apply_cols(&mut out.x_cov_future, &self.covariates, true);
        self.apply_cols(&mut out.y_true, &self.targets, true);
        out
    }

    /// Maps a normalized `k×M` prediction back to feet.
    pub fn denormalize_targets(&self, y: &mut Tensor) {
        self.apply_cols(y, &self.targets, true);
    }

    pub fn normalize_targets(&self, y: &mut Tensor) {
        self.apply_cols(y, &self.targets, false);
    }
}

/// Fits on `train` and returns every sample of `all` normalized.
pub fn fit_apply_scaler(
    train: &[WindowedSample],
    all: &[WindowedSample],
    layout: &ChannelLayout,
) -> Result<(Scaler, Vec<WindowedSample>)> {
    let scaler = Scaler::fit(train, layout)?;
    let normalized = all.iter().map(|s| scaler.transform(s)).collect();
    Ok((scaler, normalized))
}

/// Replaces the future covariates with the last observed covariate values.
pub fn mask_future_covariates(sample: &WindowedSample, layout: &ChannelLayout) -> WindowedSample {
    let mut out = sample.clone();
    let last = sample.x_past.row(sample.w() - 1);
    for r in 0..out.x_cov_future.rows() {
        for (j, &c) in layout.covariates.iter().enumerate() {
            out.x_cov_future.set(r, j, last[c]);
        }
    }
    out
}
