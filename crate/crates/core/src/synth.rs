//! Seeded mass-balance simulator of a branched tidal river.
//!
//! Every water-level station follows
//!
//! ```text
//! h_i(t+1) = h_i(t) + α_i·rain_i(t+1)
//!          + Σ_{j∈N(i)} κ_ij·(h_j(t) − h_i(t))
//!          − β_i·gate_i(t+1)
//!          + γ_i·(tide(t+1) − h_i(t))
//!          + noise
//! ```
//!
//! where `N(i)` are the stations directly connected to `i`, `κ_ij` is the
//! mean of the two stations' exchange rates, `rain_i` is the mean of the
//! rain gauges attached to `i` and `gate_i` the summed opening of attached
//! gates plus attached pump flow as a fraction of pump capacity. Rain is a
//! seeded point process, the tide a sinusoid, and structures follow a
//! threshold controller. Identical configs give bit-identical frames.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{parse_timestamp, ChannelKind, ChannelSpec, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::graph::{build_graph, NodeKind, StationGraph, TopologySpec};
use crate::nn::Tensor;

pub const PUMP_CAPACITY_CFS: f64 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    /// α, ft of rise per inch of rain.
    pub storage_gain: f64,
    /// κ, 1/h.
    pub exchange_rate: f64,
    /// β, ft/h at full opening.
    pub gate_drawdown: f64,
    /// γ, dimensionless; only meaningful next to the tide boundary.
    pub tide_coupling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StormWindow {
    pub start_hour: usize,
    pub duration: usize,
    /// Extra rain at every gauge, in/hr.
    pub rain: f64,
    /// Peak tide surge, ft (half-sine over the window).
    pub surge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forcing {
    /// Probability per hour that a rain event starts.
    pub rain_event_rate: f64,
    /// Mean event intensity, in/hr.
    pub rain_intensity: f64,
    pub rain_min_hours: usize,
    pub rain_max_hours: usize,
    pub tidal_period: f64,
    pub tidal_amplitude: f64,
    pub tide_mean: f64,
    /// Gates open above this level (ft), per-gate jitter of ±0.2 ft.
    pub gate_threshold: f64,
    pub pump_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storm: Option<StormWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "TopologySpec::bundled_default")]
    pub topology: TopologySpec,
    pub duration: usize,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: String,
    pub noise_std: f64,
    pub initial_level: f64,
    #[serde(default)]
    pub initial_levels: BTreeMap<String, f64>,
    /// Applied to every station; `tide_coupling` only to stations next to
    /// the tide boundary.
    pub defaults: Coefficients,
    #[serde(default)]
    pub overrides: BTreeMap<String, Coefficients>,
    pub forcing: Forcing,
}

fn default_start() -> String {
    "2020-01-01T00:00:00Z".into()
}

impl ScenarioConfig {
    /// Causal scenario: rain, gates and tide all drive the levels, with a
    /// storm late in the record.
    pub fn causal(duration: usize, seed: u64) -> Self {
        ScenarioConfig {
            topology: TopologySpec::bundled_default(),
            duration,
            seed,
            start: default_start(),
            noise_std: 0.01,
            initial_level: 1.0,
            initial_levels: BTreeMap::new(),
            defaults: Coefficients {
                storage_gain: 0.6,
                exchange_rate: 0.15,
                gate_drawdown: 0.08,
                tide_coupling: 0.3,
            },
            overrides: BTreeMap::new(),
            forcing: Forcing {
                rain_event_rate: 1.0 / 60.0,
                rain_intensity: 0.3,
                rain_min_hours: 3,
                rain_max_hours: 10,
                tidal_period: 12.42,
                tidal_amplitude: 1.2,
                tide_mean: 0.5,
                gate_threshold: 1.8,
                pump_threshold: 1.6,
                storm: Some(StormWindow {
                    start_hour: duration * 37 / 40,
                    duration: 18,
                    rain: 0.8,
                    surge: 1.0,
                }),
            },
        }
    }

    /// Only the tide moves the water: no rain response, no structure
    /// operations, strong coupling at the mouth.
    pub fn tide_dominated(duration: usize, seed: u64) -> Self {
        let mut cfg = Self::causal(duration, seed);
        cfg.defaults = Coefficients {
            storage_gain: 0.0,
            exchange_rate: 0.2,
            gate_drawdown: 0.0,
            tide_coupling: 0.6,
        };
        cfg.forcing.gate_threshold = 1e9;
        cfg.forcing.pump_threshold = 1e9;
        cfg.forcing.storm = None;
        cfg
    }

    pub fn named(name: &str, duration: usize, seed: u64) -> Option<Self> {
        match name {
            "default" | "causal" => Some(Self::causal(duration, seed)),
            "tide-dominated" => Some(Self::tide_dominated(duration, seed)),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

struct Plan {
    graph: StationGraph,
    start: DateTime<Utc>,
    stations: Vec<usize>,
    /// For each station: (station-neighbor position, κ_ij).
    exchange: Vec<Vec<(usize, f64)>>,
    coeffs: Vec<Coefficients>,
    /// Rain-gauge positions attached to each station.
    gauges: Vec<Vec<usize>>,
    gates: Vec<Vec<usize>>,
    pumps: Vec<Vec<usize>>,
}

fn plan(cfg: &ScenarioConfig) -> Result<Plan> {
    let graph = build_graph(&cfg.topology)?;
    let start = parse_timestamp(&cfg.start)
        .ok_or_else(|| Error::InvalidConfig(format!("bad start timestamp `{}`", cfg.start)))?;
    if cfg.duration < 2 {
        return Err(Error::InvalidConfig("duration must be at least 2 hours".into()));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
    }
    let f = &cfg.forcing;
    if !(0.0..=1.0).contains(&f.rain_event_rate)
        || f.rain_intensity < 0.0
        || f.tidal_period <= 0.0
        || f.rain_min_hours == 0
        || f.rain_max_hours < f.rain_min_hours
    {
        return Err(Error::InvalidConfig("invalid forcing parameters".into()));
    }
    for id in cfg.overrides.keys().chain(cfg.initial_levels.keys()) {
        if graph.index_of(id).is_none() {
            return Err(Error::InvalidConfig(format!("unknown node `{id}` in scenario")));
        }
    }

    let nodes = graph.nodes();
    let kind_of = |i: usize| nodes[i].kind;
    let stations: Vec<usize> = (0..nodes.len())
        .filter(|&i| kind_of(i) == NodeKind::WaterLevelStation)
        .collect();
    let pos = |i: usize| stations.iter().position(|&s| s == i);

    let mut coeffs = Vec::with_capacity(stations.len());
    for &s in &stations {
        let near_tide = graph.neighbors(s).iter().any(|&j| kind_of(j) == NodeKind::TideBoundary);
        let c = match cfg.overrides.get(&nodes[s].id) {
            Some(c) => *c,
            None => Coefficients {
                tide_coupling: if near_tide { cfg.defaults.tide_coupling } else { 0.0 },
                ..cfg.defaults
            },
        };
        let all = [c.storage_gain, c.exchange_rate, c.gate_drawdown, c.tide_coupling];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "coefficients of `{}` must be non-negative",
                nodes[s].id
            )));
        }
        if c.tide_coupling != 0.0 && !near_tide {
            return Err(Error::InvalidConfig(format!(
                "tide_coupling set on `{}`, which is not adjacent to the tide boundary",
                nodes[s].id
            )));
        }
        coeffs.push(c);
    }

    let mut exchange = vec![Vec::new(); stations.len()];
    let mut gauges = vec![Vec::new(); stations.len()];
    let mut gates = vec![Vec::new(); stations.len()];
    let mut pumps = vec![Vec::new(); stations.len()];
    for (si, &s) in stations.iter().enumerate() {
        for &j in graph.neighbors(s) {
            match kind_of(j) {
                NodeKind::WaterLevelStation => {
                    let sj = pos(j).unwrap();
                    let k = 0.5 * (coeffs[si].exchange_rate + coeffs[sj].exchange_rate);
                    exchange[si].push((sj, k));
                }
                NodeKind::RainGauge => gauges[si].push(j),
                NodeKind::Gate => gates[si].push(j),
                NodeKind::Pump => pumps[si].push(j),
                NodeKind::TideBoundary => {}
            }
        }
        // explicit update must stay a convex combination
        let outflow: f64 = exchange[si].iter().map(|(_, k)| k).sum::<f64>() + coeffs[si].tide_coupling;
        if outflow > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "unstable coefficients at `{}`: total exchange {outflow} > 1 per hour",
                nodes[s].id
            )));
        }
    }

    Ok(Plan {
        graph,
        start,
        stations,
        exchange,
        coeffs,
        gauges,
        gates,
        pumps,
    })
}

/// Channel layout of generated frames: one channel per node, in node order.
pub fn channels_for(graph: &StationGraph) -> Vec<ChannelSpec> {
    graph
        .nodes()
        .iter()
        .map(|n| {
            let (suffix, kind) = match n.kind {
                NodeKind::WaterLevelStation => ("level", ChannelKind::WaterLevel),
                NodeKind::RainGauge => ("rain", ChannelKind::Rainfall),
                NodeKind::Gate => ("gate", ChannelKind::GateOpening),
                NodeKind::Pump => ("pump", ChannelKind::PumpFlow),
                NodeKind::TideBoundary => ("tide", ChannelKind::Tide),
            };
            ChannelSpec::new(format!("{}_{suffix}", n.id), &n.id, kind)
        })
        .collect()
}

fn tide_at(f: &Forcing, hour: usize) -> f64 {
    let mut tide = f.tide_mean + f.tidal_amplitude * (2.0 * PI * hour as f64 / f.tidal_period).sin();
    if let Some(s) = f.storm {
        if hour >= s.start_hour && hour < s.start_hour + s.duration {
            let phase = (hour - s.start_hour) as f64 + 0.5;
            tide += s.surge * (PI * phase / s.duration as f64).sin();
        }
    }
    tide
}

/// Per-gauge hourly rain series.
fn rain_series(cfg: &ScenarioConfig, gauges: usize) -> Vec<Vec<f64>> {
    let f = &cfg.forcing;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5241_494e);
    let mut rain = vec![vec![0.0; cfg.duration]; gauges];
    let intensity = (f.rain_intensity > 0.0).then(|| Exp::new(1.0 / f.rain_intensity).unwrap());
    for hour in 0..cfg.duration {
        if f.rain_event_rate > 0.0 && rng.gen::<f64>() < f.rain_event_rate {
            let len = rng.gen_range(f.rain_min_hours..=f.rain_max_hours);
            let peak = intensity.map_or(0.0, |d| d.sample(&mut rng));
            for series in rain.iter_mut() {
                let local = peak * rng.gen_range(0.5..1.5);
                for (step, h) in (hour..(hour + len).min(cfg.duration)).enumerate() {
                    // triangular hyetograph
                    let x = (step as f64 + 0.5) / len as f64;
                    series[h] += local * 2.0 * x.min(1.0 - x) * 2.0;
                }
            }
        }
        if let Some(s) = f.storm {
            if hour >= s.start_hour && hour < s.start_hour + s.duration {
                for series in rain.iter_mut() {
                    series[hour] += s.rain;
                }
            }
        }
    }
    rain
}

/// Runs the scenario and returns the hourly frame (`duration` rows).
pub fn generate(cfg: &ScenarioConfig) -> Result<TimeSeriesFrame> {
    let p = plan(cfg)?;
    let nodes = p.graph.nodes();
    let n = nodes.len();
    let t_len = cfg.duration;
    let f = &cfg.forcing;

    let gauge_nodes: Vec<usize> = (0..n).filter(|&i| nodes[i].kind == NodeKind::RainGauge).collect();
    let rain = rain_series(cfg, gauge_nodes.len());
    let rain_of = |node: usize, hour: usize| -> f64 {
        let g = gauge_nodes.iter().position(|&x| x == node).unwrap();
        rain[g][hour]
    };

    let mut ctl_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4741_5445);
    let gate_thresholds: Vec<f64> = (0..n)
        .map(|_| f.gate_threshold + ctl_rng.gen_range(-0.2..0.2))
        .collect();
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).unwrap());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4e4f_4953);

    let mut values = Tensor::zeros(t_len, n);
    let mut h: Vec<f64> = p
        .stations
        .iter()
        .map(|&s| *cfg.initial_levels.get(&nodes[s].id).unwrap_or(&cfg.initial_level))
        .collect();
    let mut opening = vec![0.0; n];
    let mut pump_on = vec![false; n];

    let write_row = |values: &mut Tensor, hour: usize, h: &[f64], opening: &[f64], pump_on: &[bool]| {
        for (si, &s) in p.stations.iter().enumerate() {
            values.set(hour, s, h[si]);
        }
        for i in 0..n {
            let v = match nodes[i].kind {
                NodeKind::WaterLevelStation => continue,
                NodeKind::RainGauge => rain_of(i, hour),
                NodeKind::Gate => opening[i],
                NodeKind::Pump => {
                    if pump_on[i] {
                        PUMP_CAPACITY_CFS
                    } else {
                        0.0
                    }
                }
                NodeKind::TideBoundary => tide_at(f, hour),
            };
            values.set(hour, i, v);
        }
    };
    write_row(&mut values, 0, &h, &opening, &pump_on);

    for hour in 1..t_len {
        // controllers react to the previous hour's levels
        for (si, _) in p.stations.iter().enumerate() {
            for &g in &p.gates[si] {
                opening[g] = if h[si] > gate_thresholds[g] {
                    (opening[g] + 0.25).min(1.0)
                } else {
                    (opening[g] - 0.25).max(0.0)
                };
            }
            for &pu in &p.pumps[si] {
                // hysteresis band of 0.3 ft
                if h[si] > f.pump_threshold {
                    pump_on[pu] = true;
                } else if h[si] < f.pump_threshold - 0.3 {
                    pump_on[pu] = false;
                }
            }
        }
        let tide = tide_at(f, hour);
        let mut next = h.clone();
        for si in 0..p.stations.len() {
            let c = &p.coeffs[si];
            let rain_in = if p.gauges[si].is_empty() {
                0.0
            } else {
                p.gauges[si].iter().map(|&g| rain_of(g, hour)).sum::<f64>() / p.gauges[si].len() as f64
            };
            let structures: f64 = p.gates[si].iter().map(|&g| opening[g]).sum::<f64>()
                + p.pumps[si]
                    .iter()
                    .map(|&pu| if pump_on[pu] { 1.0 } else { 0.0 })
                    .sum::<f64>();
            let exchange: f64 = p.exchange[si].iter().map(|&(sj, k)| k * (h[sj] - h[si])).sum();
            let mut dh =
                c.storage_gain * rain_in + exchange - c.gate_drawdown * structures + c.tide_coupling * (tide - h[si]);
            if let Some(d) = noise {
                dh += d.sample(&mut noise_rng);
            }
            next[si] = h[si] + dh;
        }
        h = next;
        write_row(&mut values, hour, &h, &opening, &pump_on);
    }

    Ok(TimeSeriesFrame::new(p.start, channels_for(&p.graph), values))
}
