//! Experiment description shared by the command line and the test suites.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//! models = ["gtn-parallel", "gtn-series", "persistence"]
//!
//! [data]
//! scenario = "default"   # or a scenario file, or `csv` + `topology`
//! hours = 4000
//!
//! [model]
//! hidden_dim = 64
//!
//! [train]
//! epochs = 20
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_frame, split_train_test, windows_with_layout, ChannelLayout, Scaler, TimeSeriesFrame, WindowedSample,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, StationGraph, TopologySpec};
use crate::models::{Architecture, ModelConfig};
use crate::synth::{generate, ScenarioConfig};
use crate::train::{Arm, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<PathBuf>,
    /// Bundled scenario name or path to a scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hours: Option<usize>,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_seed: Option<u64>,
}

/// Architecture-independent model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelHyper {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_gcn_layers: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelHyper {
            hidden_dim: d.hidden_dim,
            n_heads: d.n_heads,
            n_encoder_layers: d.n_encoder_layers,
            n_gcn_layers: d.n_gcn_layers,
            lstm_layers: d.lstm_layers,
            dropout: d.dropout,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_w() -> usize {
    72
}
fn default_k() -> usize {
    24
}
fn default_split() -> f64 {
    0.8
}
fn default_arms() -> Vec<Arm> {
    Arm::BOTH.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    pub models: Vec<Architecture>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelHyper,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Windowed, split and scaled data of one experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: StationGraph,
    pub frame: TimeSeriesFrame,
    pub layout: ChannelLayout,
    pub train: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub scaler: Scaler,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are joined onto `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.data.csv.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.topology.as_mut() {
            resolve(p);
        }
        if let Some(s) = cfg.data.scenario.as_mut() {
            if ScenarioConfig::named(s, 1, 0).is_none() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.w == 0 || self.k == 0 {
            return bad("w and k must be at least 1".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} not in (0, 1)", self.split_ratio));
        }
        if self.models.is_empty() || self.arms.is_empty() {
            return bad("models and arms must be non-empty".into());
        }
        let mut seen = self.models.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.models.len() {
            return bad("duplicate architecture in models".into());
        }
        for &a in &self.models {
            self.model_config(a, Arm::WithFpc).validate()?;
        }
        self.train.validate()?;
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                bad(format!("{what} `{}` does not exist", p.display()))
            }
        };
        match (&self.data.csv, &self.data.scenario) {
            (Some(csv), None) => {
                exists(csv, "data csv")?;
                match &self.data.topology {
                    Some(t) => exists(t, "topology")?,
                    None => return bad("csv data needs a topology file".into()),
                }
            }
            (None, Some(s)) => {
                if ScenarioConfig::named(s, 1, 0).is_none() {
                    exists(Path::new(s), "scenario")?;
                }
            }
            _ => return bad("data needs exactly one of `csv` or `scenario`".into()),
        }
        Ok(())
    }

    pub fn model_config(&self, architecture: Architecture, arm: Arm) -> ModelConfig {
        let h = &self.model;
        ModelConfig {
            architecture,
            w: self.w,
            k: self.k,
            hidden_dim: h.hidden_dim,
            n_heads: h.n_heads,
            n_encoder_layers: h.n_encoder_layers,
            n_gcn_layers: h.n_gcn_layers,
            lstm_layers: h.lstm_layers,
            dropout: h.dropout,
            use_future_covariates: arm.uses_future_covariates(),
            seed: self.seed,
        }
    }

    /// The scenario this experiment generates, if it uses synthetic data.
    pub fn scenario(&self) -> Result<Option<ScenarioConfig>> {
        let Some(name) = &self.data.scenario else {
            return Ok(None);
        };
        let seed = self.data.scenario_seed.unwrap_or(self.seed);
        let hours = self.data.hours;
        let cfg = match ScenarioConfig::named(name, hours.unwrap_or(4000), seed) {
            Some(c) => c,
            None => {
                let path = Path::new(name);
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut c = ScenarioConfig::from_toml(&text).map_err(|e| Error::parse(path, e.message()))?;
                if let Some(h) = hours {
                    c.duration = h;
                }
                c
            }
        };
        Ok(Some(cfg))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let (graph, frame) = match self.scenario()? {
            Some(sc) => (build_graph(&sc.topology)?, generate(&sc)?),
            None => {
                let topo = self.data.topology.as_deref().expect("validated");
                let graph = build_graph(&TopologySpec::load(topo)?)?;
                let frame = load_frame(self.data.csv.as_deref().expect("validated"), &graph)?;
                (graph, frame)
            }
        };
        if frame.len() < self.w + self.k + 1 {
            return Err(Error::FrameTooShort {
                t: frame.len(),
                needed: self.w + self.k + 1,
            });
        }
        let layout = ChannelLayout::new(&frame.channels, &graph)?;
        let samples = windows_with_layout(&frame, self.w, self.k, &layout)?;
        let (train, test) = split_train_test(samples, self.split_ratio)?;
        let scaler = Scaler::fit(&train, &layout)?;
        Ok(Dataset {
            graph,
            frame,
            layout,
            train,
            test,
            scaler,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults_and_resolves_paths() {
        let cfg = ExperimentConfig::from_toml(
            "models = [\"gtn-parallel\", \"persistence\"]\n[data]\nscenario = \"default\"\nhours = 300\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!((cfg.w, cfg.k, cfg.split_ratio), (72, 24, 0.8));
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.arms, Arm::BOTH.to_vec());
        let d = cfg.dataset().unwrap();
        assert_eq!(d.frame.len(), 300);
        assert_eq!(d.train.len() + d.test.len() + 23, 300 - 72 - 24 + 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new("/nonexistent");
        for text in [
            "models = []\n[data]\nscenario = \"default\"\n",
            "models = [\"rnn\", \"rnn\"]\n[data]\nscenario = \"default\"\n",
            "models = [\"rnn\"]\n[data]\nscenario = \"nope.toml\"\n",
            "models = [\"rnn\"]\n[data]\ncsv = \"x.csv\"\ntopology = \"t.toml\"\n",
            "models = [\"lstm\"]\n[data]\nscenario = \"default\"\n",
            "models = [\"rnn\"]\nsplit_ratio = 1.5\n[data]\nscenario = \"default\"\n",
            "models = [\"rnn\"]\n[model]\nhidden_dim = 10\nn_heads = 4\n[data]\nscenario = \"default\"\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text, base), Err(Error::InvalidConfig(_))),
                "{text}"
            );
        }
    }
}
