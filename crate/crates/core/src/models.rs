//! Forecasting architectures sharing one contract: a windowed sample in, a
//! `k×M` water-level forecast in feet out.
//!
//! Every learned architecture predicts a normalized change relative to the
//! last observed level of each target, so an untrained network starts out
//! as the persistence forecast.
//!
//! Inputs are assembled from the normalized sample in three shapes:
//!
//! - sequence: `(w+k)×(F+1)` rows of all channels plus an `is_future` flag;
//!   future water levels are zero, future covariates come from the sample;
//! - node slots: per node and hour a vector
//!   `[level, rain, tide, gate, pump, is_future]` of the channels attached to
//!   that node, stacked node-major as `(N·(w+k))×6`;
//! - covariate patches: per covariate channel its `w+k` hour trajectory cut
//!   into consecutive patches of [`patch_len`] hours.

use std::path::Path;
use std::rc::Rc;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mask_future_covariates, ChannelKind, ChannelLayout, Scaler, WindowedSample};
use crate::error::{Error, Result};
use crate::graph::{build_graph, normalized_adjacency, StationGraph, TopologySpec};
use crate::nn::checkpoint;
use crate::nn::layers::{GcnLayer, Linear, Lstm, MultiHeadAttention, TransformerEncoder};
use crate::nn::{Mode, ModelParams, ParamId, Tape, Tensor, Var};

/// Width of the node slot vector.
pub const SLOT_WIDTH: usize = 6;
const FUTURE_SLOT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    GtnParallel,
    GtnSeries,
    Rnn,
    Cnn,
    Tcn,
    Gcn,
    Transformer,
    Persistence,
}

impl Architecture {
    pub const ALL: [Architecture; 8] = [
        Architecture::GtnParallel,
        Architecture::GtnSeries,
        Architecture::Rnn,
        Architecture::Cnn,
        Architecture::Tcn,
        Architecture::Gcn,
        Architecture::Transformer,
        Architecture::Persistence,
    ];

    pub const LEARNED: [Architecture; 7] = [
        Architecture::GtnParallel,
        Architecture::GtnSeries,
        Architecture::Rnn,
        Architecture::Cnn,
        Architecture::Tcn,
        Architecture::Gcn,
        Architecture::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::GtnParallel => "gtn-parallel",
            Architecture::GtnSeries => "gtn-series",
            Architecture::Rnn => "rnn",
            Architecture::Cnn => "cnn",
            Architecture::Tcn => "tcn",
            Architecture::Gcn => "gcn",
            Architecture::Transformer => "transformer",
            Architecture::Persistence => "persistence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn is_learned(self) -> bool {
        self != Architecture::Persistence
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub w: usize,
    pub k: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_gcn_layers: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub use_future_covariates: bool,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::GtnParallel,
            w: 72,
            k: 24,
            hidden_dim: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_gcn_layers: 2,
            lstm_layers: 1,
            dropout: 0.1,
            use_future_covariates: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.w == 0 || self.k == 0 {
            return bad("w and k must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.n_gcn_layers == 0 || self.lstm_layers == 0 {
            return bad("n_gcn_layers and lstm_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Fusion attention of gtn-parallel: for each target, a `k×C` matrix whose
/// rows are distributions over covariate channels (averaged over heads).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTable {
    pub targets: Vec<String>,
    pub channels: Vec<String>,
    pub weights: Vec<Tensor>,
}

impl AttentionTable {
    /// Weight per channel averaged over the horizon.
    pub fn mean_weights(&self, target: usize) -> Vec<f64> {
        let w = &self.weights[target];
        (0..w.cols())
            .map(|c| w.column(c).iter().sum::<f64>() / w.rows() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `k×M`, feet.
    pub y_hat: Tensor,
    pub anchor: DateTime<Utc>,
    pub attention: Option<AttentionTable>,
}

/// Static shapes of one model instance.
#[derive(Debug, Clone)]
struct Dims {
    w: usize,
    k: usize,
    f: usize,
    c: usize,
    m: usize,
    n: usize,
    d: usize,
}

impl Dims {
    fn len(&self) -> usize {
        self.w + self.k
    }
}

#[derive(Debug, Clone)]
struct ParallelNet {
    gcn: Vec<GcnLayer>,
    lstm: Lstm,
    cov_in: Linear,
    encoder: TransformerEncoder,
    cov_out: Linear,
    horizon: ParamId,
    fusion: MultiHeadAttention,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone)]
struct SeriesNet {
    input: Linear,
    encoder: TransformerEncoder,
    gcn: Vec<GcnLayer>,
    lstm: Lstm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct RnnNet {
    lstm: Lstm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct CnnNet {
    convs: Vec<Linear>,
    pools: Vec<bool>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct TcnNet {
    input: Linear,
    convs: Vec<Linear>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct GcnNet {
    layers: Vec<GcnLayer>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct TransformerNet {
    input: Linear,
    encoder: TransformerEncoder,
    head: Linear,
}

#[derive(Debug, Clone)]
enum Net {
    Parallel(ParallelNet),
    Series(SeriesNet),
    Rnn(RnnNet),
    Cnn(CnnNet),
    Tcn(TcnNet),
    Gcn(GcnNet),
    Transformer(TransformerNet),
    Persistence,
}

pub const CNN_LAYERS: usize = 3;

/// Hours per covariate patch token: the largest divisor of `len` up to 12.
pub fn patch_len(len: usize) -> usize {
    (1..=len.min(12)).rev().find(|p| len.is_multiple_of(*p)).unwrap_or(1)
}

/// Receptive field of a kernel-3 causal stack with dilations `1, 2, 4, ...`.
pub fn tcn_receptive_field(layers: usize) -> usize {
    1 + 2 * ((1usize << layers) - 1)
}

/// Fewest layers whose receptive field covers `len` steps.
pub fn tcn_layers_for(len: usize) -> usize {
    (0..).find(|&l| tcn_receptive_field(l) >= len).unwrap()
}

fn gcn_stack(
    p: &mut ModelParams,
    name: &str,
    in_dim: usize,
    d: usize,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GcnLayer> {
    (0..layers)
        .map(|l| GcnLayer::new(p, &format!("{name}.{l}"), if l == 0 { in_dim } else { d }, d, rng))
        .collect()
}

impl Net {
    fn build(cfg: &ModelConfig, dims: &Dims, p: &mut ModelParams) -> Result<Net> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let d = dims.d;
        let seq_in = dims.f + 1;
        let enc = |p: &mut ModelParams, name: &str, rng: &mut ChaCha8Rng| {
            TransformerEncoder::new(p, name, d, cfg.n_heads, cfg.n_encoder_layers, cfg.dropout, rng)
        };
        Ok(match cfg.architecture {
            Architecture::GtnParallel => {
                if dims.c == 0 {
                    return Err(Error::InvalidConfig(
                        "gtn-parallel needs at least one covariate channel".into(),
                    ));
                }
                ParallelNet {
                    gcn: gcn_stack(p, "branch_a.gcn", 2, d, cfg.n_gcn_layers, rng),
                    lstm: Lstm::new(p, "branch_a.lstm", d, d, cfg.lstm_layers, rng),
                    cov_in: Linear::new(p, "branch_b.input", patch_len(dims.len()), d, rng),
                    encoder: enc(p, "branch_b.encoder", rng)?,
                    cov_out: Linear::new(p, "branch_b.output", dims.len() / patch_len(dims.len()) * d, d, rng),
                    horizon: p.add_weight("fusion.horizon", dims.k, d, rng),
                    fusion: MultiHeadAttention::new(p, "fusion.attn", d, cfg.n_heads, rng)?,
                    head_w: p.add_weight("head.w", dims.k, 2 * d, rng),
                    head_b: p.add_zeros("head.b", dims.k, 1),
                }
                .into()
            }
            Architecture::GtnSeries => SeriesNet {
                input: Linear::new(p, "station.input", SLOT_WIDTH, d, rng),
                encoder: enc(p, "station.encoder", rng)?,
                gcn: gcn_stack(p, "gcn", d, d, cfg.n_gcn_layers, rng),
                lstm: Lstm::new(p, "lstm", d, d, cfg.lstm_layers, rng),
                head: Linear::new(p, "head", d, 1, rng),
            }
            .into(),
            Architecture::Rnn => Net::Rnn(RnnNet {
                lstm: Lstm::new(p, "lstm", seq_in, d, cfg.lstm_layers, rng),
                head: Linear::new(p, "head", d, dims.k * dims.m, rng),
            }),
            Architecture::Cnn => {
                let mut convs = Vec::new();
                let mut pools = Vec::new();
                let mut rows = dims.len();
                for l in 0..CNN_LAYERS {
                    let cin = if l == 0 { seq_in } else { d };
                    convs.push(Linear::new(p, &format!("conv.{l}"), 3 * cin, d, rng));
                    let pool = rows >= 2;
                    if pool {
                        rows /= 2;
                    }
                    pools.push(pool);
                }
                Net::Cnn(CnnNet {
                    convs,
                    pools,
                    head: Linear::new(p, "head", rows * d, dims.k * dims.m, rng),
                })
            }
            Architecture::Tcn => {
                let layers = tcn_layers_for(dims.len()).max(1);
                Net::Tcn(TcnNet {
                    input: Linear::new(p, "input", seq_in, d, rng),
                    convs: (0..layers)
                        .map(|l| Linear::new(p, &format!("conv.{l}"), 3 * d, d, rng))
                        .collect(),
                    head: Linear::new(p, "head", d, dims.k * dims.m, rng),
                })
            }
            Architecture::Gcn => Net::Gcn(GcnNet {
                layers: gcn_stack(p, "gcn", SLOT_WIDTH * dims.len(), d, cfg.n_gcn_layers, rng),
                head: Linear::new(p, "head", d, dims.k, rng),
            }),
            Architecture::Transformer => Net::Transformer(TransformerNet {
                input: Linear::new(p, "input", seq_in, d, rng),
                encoder: enc(p, "encoder", rng)?,
                head: Linear::new(p, "head", d, dims.m, rng),
            }),
            Architecture::Persistence => Net::Persistence,
        })
    }
}

impl From<ParallelNet> for Net {
    fn from(n: ParallelNet) -> Self {
        Net::Parallel(n)
    }
}

impl From<SeriesNet> for Net {
    fn from(n: SeriesNet) -> Self {
        Net::Series(n)
    }
}

/// A forecaster bound to one graph, channel layout and fitted scaler.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    topology: TopologySpec,
    layout: ChannelLayout,
    scaler: Scaler,
    params: ModelParams,
    net: Net,
    dims: Dims,
    adjacency: Tensor,
    /// Position of each frame column among the covariates.
    cov_pos: Vec<Option<usize>>,
    /// Replaces the covariate memory of gtn-parallel with zeros.
    pub ablate_covariate_branch: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    topology: TopologySpec,
    layout: ChannelLayout,
    scaler: Scaler,
    metadata: serde_json::Value,
}

impl Model {
    pub fn new(config: ModelConfig, graph: &StationGraph, layout: ChannelLayout, scaler: Scaler) -> Result<Model> {
        config.validate()?;
        let ids: Vec<&str> = graph.nodes().iter().map(|n| n.id.as_str()).collect();
        if layout.node_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
            return Err(Error::InvalidConfig(
                "channel layout was built for a different graph".into(),
            ));
        }
        if scaler.mean.len() != layout.feature_count() {
            return Err(Error::InvalidConfig(format!(
                "scaler has {} channels, layout has {}",
                scaler.mean.len(),
                layout.feature_count()
            )));
        }
        let dims = Dims {
            w: config.w,
            k: config.k,
            f: layout.feature_count(),
            c: layout.covariate_count(),
            m: layout.target_count(),
            n: layout.node_count(),
            d: config.hidden_dim,
        };
        let mut params = ModelParams::new();
        let net = Net::build(&config, &dims, &mut params)?;
        let adj = normalized_adjacency(graph);
        let adjacency = Tensor::from_vec(adj.dim(), adj.dim(), adj.values)?;
        let mut cov_pos = vec![None; layout.feature_count()];
        for (j, &c) in layout.covariates.iter().enumerate() {
            cov_pos[c] = Some(j);
        }
        Ok(Model {
            config,
            topology: graph.to_spec(),
            layout,
            scaler,
            params,
            net,
            dims,
            adjacency,
            cov_pos,
            ablate_covariate_branch: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn topology(&self) -> &TopologySpec {
        &self.topology
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn check_sample(&self, s: &WindowedSample) -> Result<()> {
        let d = &self.dims;
        let expect = [[d.w, d.f], [d.k, d.c], [d.k, d.m]];
        let got = [s.x_past.shape(), s.x_cov_future.shape(), s.y_true.shape()];
        for (e, g) in expect.iter().zip(&got) {
            if e != g {
                return Err(Error::Shape {
                    op: "sample vs model config",
                    lhs: g.to_vec(),
                    rhs: e.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Masks future covariates when the model does not use them, then
    /// normalizes. The result is what the network consumes.
    pub fn prepare(&self, raw: &WindowedSample) -> Result<WindowedSample> {
        self.check_sample(raw)?;
        let s = if self.config.use_future_covariates {
            raw.clone()
        } else {
            mask_future_covariates(raw, &self.layout)
        };
        Ok(self.scaler.transform(&s))
    }

    /// Normalized `k×M` prediction for a prepared sample.
    pub fn forward_normalized(&self, t: &mut Tape, s: &WindowedSample) -> Result<Var> {
        Ok(self.forward_inner(t, &self.params, s)?.0)
    }

    /// As [`Model::forward_normalized`] but with explicit parameters, for
    /// gradient checks.
    pub fn forward_with_params(&self, t: &mut Tape, params: &ModelParams, s: &WindowedSample) -> Result<Var> {
        Ok(self.forward_inner(t, params, s)?.0)
    }

    /// Runs a training pass on a prepared sample and adds the parameter
    /// gradients of the MSE loss into `params`. Returns the loss.
    pub fn accumulate_gradients(&mut self, s: &WindowedSample, dropout_seed: u64) -> Result<f64> {
        let mut t = Tape::new(Mode::Train { seed: dropout_seed });
        let y = self.forward_normalized(&mut t, s)?;
        let target = t.constant(s.y_true.clone());
        let loss = t.mse(y, target)?;
        let value = t.value(loss).get(0, 0);
        if !value.is_finite() {
            return Ok(value);
        }
        if !self.params.is_empty() {
            let g = t.backward(loss)?;
            g.accumulate(&t, &mut self.params);
        }
        Ok(value)
    }

    /// Forecast in feet for a raw (unnormalized) sample.
    pub fn forward(&self, raw: &WindowedSample) -> Result<Forecast> {
        let s = self.prepare(raw)?;
        let mut t = Tape::new(Mode::Eval);
        let (y, attn) = self.forward_inner(&mut t, &self.params, &s)?;
        let mut y_hat = t.value(y).clone();
        self.scaler.denormalize_targets(&mut y_hat);
        if !y_hat.all_finite() {
            return Err(Error::NonFinite(format!("{} forecast", self.config.architecture)));
        }
        let attention = attn.map(|a| self.attention_table(&t, &a)).transpose()?;
        Ok(Forecast {
            y_hat,
            anchor: raw.anchor,
            attention,
        })
    }

    pub fn predict(&self, samples: &[WindowedSample]) -> Result<Vec<Forecast>> {
        samples.iter().map(|s| self.forward(s)).collect()
    }

    /// Fusion attention over covariate channels, gtn-parallel only.
    pub fn extract_attention(&self, raw: &WindowedSample) -> Result<AttentionTable> {
        if !matches!(self.net, Net::Parallel(_)) {
            return Err(Error::NotSupported(self.config.architecture.to_string()));
        }
        self.forward(raw)?
            .attention
            .ok_or_else(|| Error::NotSupported(self.config.architecture.to_string()))
    }

    fn attention_table(&self, t: &Tape, heads: &[Var]) -> Result<AttentionTable> {
        let (k, m, c) = (self.dims.k, self.dims.m, self.dims.c);
        let mut weights = vec![Tensor::zeros(k, c); m];
        for &h in heads {
            let a = t.value(h);
            for (mi, wt) in weights.iter_mut().enumerate() {
                for j in 0..k {
                    for (o, x) in wt.row_mut(j).iter_mut().zip(a.row(mi * k + j)) {
                        *o += x / heads.len() as f64;
                    }
                }
            }
        }
        Ok(AttentionTable {
            targets: self.layout.target_ids.clone(),
            channels: self
                .layout
                .covariates
                .iter()
                .map(|&c| self.layout.channels[c].name.clone())
                .collect(),
            weights,
        })
    }

    fn last_levels(&self, s: &WindowedSample) -> Tensor {
        let last = s.x_past.row(self.dims.w - 1);
        Tensor::row_vector(self.layout.targets.iter().map(|&c| last[c]).collect())
    }

    /// Value of frame column `col` at sequence row `r` (past then future).
    fn seq_value(&self, s: &WindowedSample, r: usize, col: usize) -> f64 {
        if r < self.dims.w {
            s.x_past.get(r, col)
        } else {
            match self.cov_pos[col] {
                Some(j) => s.x_cov_future.get(r - self.dims.w, j),
                None => 0.0,
            }
        }
    }

    fn sequence(&self, s: &WindowedSample) -> Tensor {
        let (l, f) = (self.dims.len(), self.dims.f);
        let mut out = Tensor::zeros(l, f + 1);
        for r in 0..l {
            for col in 0..f {
                out.set(r, col, self.seq_value(s, r, col));
            }
            out.set(r, f, if r >= self.dims.w { 1.0 } else { 0.0 });
        }
        out
    }

    /// `(N·L)×6`, node-major.
    fn node_slots(&self, s: &WindowedSample) -> Tensor {
        let (l, n) = (self.dims.len(), self.dims.n);
        let mut out = Tensor::zeros(n * l, SLOT_WIDTH);
        for (col, spec) in self.layout.channels.iter().enumerate() {
            let node = self.layout.channel_node[col];
            let slot = spec.kind.slot();
            for r in 0..l {
                let v = out.get(node * l + r, slot) + self.seq_value(s, r, col);
                out.set(node * l + r, slot, v);
            }
        }
        for node in 0..n {
            for r in self.dims.w..l {
                out.set(node * l + r, FUTURE_SLOT, 1.0);
            }
        }
        out
    }

    fn forward_inner(&self, t: &mut Tape, p: &ModelParams, s: &WindowedSample) -> Result<(Var, Option<Vec<Var>>)> {
        self.check_sample(s)?;
        let dm = &self.dims;
        let dropout = self.config.dropout;
        let adj = Rc::new(self.adjacency.clone());
        let last = t.constant(self.last_levels(s));
        let mut attention = None;
        let delta = match &self.net {
            Net::Persistence => {
                let tiled = Tensor::from_vec(dm.k, dm.m, t.value(last).data().repeat(dm.k))?;
                return Ok((t.constant(tiled), None));
            }
            Net::Parallel(net) => {
                // branch A: graph over past levels, LSTM over target nodes
                let mut feats = Tensor::zeros(dm.w * dm.n, 2);
                for (col, spec) in self.layout.channels.iter().enumerate() {
                    if spec.kind == ChannelKind::WaterLevel {
                        let node = self.layout.channel_node[col];
                        for r in 0..dm.w {
                            let row = r * dm.n + node;
                            feats.set(row, 0, feats.get(row, 0) + s.x_past.get(r, col));
                            feats.set(row, 1, 1.0);
                        }
                    }
                }
                let mut h = t.constant(feats);
                for g in &net.gcn {
                    h = g.forward(t, p, h, &adj)?;
                }
                let idx = time_major_targets(dm.w, dm.n, &self.layout.target_nodes);
                let seq = t.gather_rows(h, &idx)?;
                let state = net.lstm.final_state(t, p, seq, dm.w, dm.m)?;
                let state = t.dropout(state, dropout);

                // branch B: per-channel temporal encoder over patches, flattened
                // to one memory row per channel; channels never mix
                let memory = if self.ablate_covariate_branch {
                    t.constant(Tensor::zeros(dm.c, dm.d))
                } else {
                    let mut traj = Tensor::zeros(dm.c, dm.len());
                    for (j, &col) in self.layout.covariates.iter().enumerate() {
                        for r in 0..dm.len() {
                            traj.set(j, r, self.seq_value(s, r, col));
                        }
                    }
                    let pl = patch_len(dm.len());
                    let patches = dm.len() / pl;
                    let x = t.constant(traj.reshaped(dm.c * patches, pl)?);
                    let tokens = net.cov_in.forward(t, p, x)?;
                    let enc = net.encoder.forward(t, p, tokens, dm.c)?;
                    let flat = t.reshape(enc, dm.c, patches * dm.d)?;
                    net.cov_out.forward(t, p, flat)?
                };

                // fusion: query (m, j) = h_m + P_j attends over channels
                let rep_m: Vec<usize> = (0..dm.m).flat_map(|m| std::iter::repeat_n(m, dm.k)).collect();
                let rep_j: Vec<usize> = (0..dm.m).flat_map(|_| 0..dm.k).collect();
                let h_rep = t.gather_rows(state, &rep_m)?;
                let pos = t.param(p, net.horizon);
                let pos = t.gather_rows(pos, &rep_j)?;
                let q = t.add(h_rep, pos)?;
                let fused = net.fusion.forward(t, p, q, memory, 1)?;
                attention = Some(fused.weights[0].clone());
                let z = t.concat_cols(&[h_rep, fused.out])?;
                let u = t.param(p, net.head_w);
                let u = t.gather_rows(u, &rep_j)?;
                let b = t.param(p, net.head_b);
                let b = t.gather_rows(b, &rep_j)?;
                let zu = t.mul(z, u)?;
                let y = t.row_sum(zu);
                let y = t.add(y, b)?;
                let y = t.reshape(y, dm.m, dm.k)?;
                t.transpose(y)
            }
            Net::Series(net) => {
                let l = dm.len();
                let x = t.constant(self.node_slots(s));
                let x = net.input.forward(t, p, x)?;
                let enc = net.encoder.forward(t, p, x, dm.n)?;
                let to_time: Vec<usize> = (0..l).flat_map(|r| (0..dm.n).map(move |n| n * l + r)).collect();
                let mut h = t.gather_rows(enc, &to_time)?;
                for g in &net.gcn {
                    h = g.forward(t, p, h, &adj)?;
                }
                let idx = time_major_targets(l, dm.n, &self.layout.target_nodes);
                let seq = t.gather_rows(h, &idx)?;
                // each future hour is read from the LSTM output at that hour
                let states = net.lstm.sequence(t, p, seq, l, dm.m)?;
                let future = t.slice_rows(states, dm.w * dm.m, l * dm.m)?;
                let future = t.dropout(future, dropout);
                let y = net.head.forward(t, p, future)?;
                t.reshape(y, dm.k, dm.m)?
            }
            Net::Rnn(net) => {
                let x = t.constant(self.sequence(s));
                let state = net.lstm.final_state(t, p, x, dm.len(), 1)?;
                let state = t.dropout(state, dropout);
                let y = net.head.forward(t, p, state)?;
                t.reshape(y, dm.k, dm.m)?
            }
            Net::Cnn(net) => {
                let mut h = t.constant(self.sequence(s));
                for (conv, &pool) in net.convs.iter().zip(&net.pools) {
                    let prev = t.shift_rows(h, 1);
                    let next = t.shift_rows(h, -1);
                    let window = t.concat_cols(&[prev, h, next])?;
                    h = conv.forward(t, p, window)?;
                    h = t.relu(h);
                    if pool {
                        h = t.avg_pool_rows(h, 2)?;
                    }
                }
                let [rows, cols] = t.shape(h);
                let flat = t.reshape(h, 1, rows * cols)?;
                let flat = t.dropout(flat, dropout);
                let y = net.head.forward(t, p, flat)?;
                t.reshape(y, dm.k, dm.m)?
            }
            Net::Tcn(net) => {
                let x = t.constant(self.sequence(s));
                let mut h = net.input.forward(t, p, x)?;
                for (l, conv) in net.convs.iter().enumerate() {
                    let dil = 1isize << l;
                    let far = t.shift_rows(h, 2 * dil);
                    let near = t.shift_rows(h, dil);
                    let window = t.concat_cols(&[far, near, h])?;
                    let c = conv.forward(t, p, window)?;
                    let c = t.relu(c);
                    h = t.add(h, c)?;
                }
                let last_step = t.slice_rows(h, dm.len() - 1, dm.len())?;
                let last_step = t.dropout(last_step, dropout);
                let y = net.head.forward(t, p, last_step)?;
                t.reshape(y, dm.k, dm.m)?
            }
            Net::Gcn(net) => {
                let slots = self.node_slots(s);
                let x = t.constant(slots.reshaped(dm.n, SLOT_WIDTH * dm.len())?);
                let mut h = x;
                for g in &net.layers {
                    h = g.forward(t, p, h, &adj)?;
                }
                let h = t.gather_rows(h, &self.layout.target_nodes)?;
                let h = t.dropout(h, dropout);
                let y = net.head.forward(t, p, h)?;
                t.transpose(y)
            }
            Net::Transformer(net) => {
                let x = t.constant(self.sequence(s));
                let x = net.input.forward(t, p, x)?;
                let h = net.encoder.forward(t, p, x, 1)?;
                let fut = t.slice_rows(h, dm.w, dm.len())?;
                let fut = t.dropout(fut, dropout);
                net.head.forward(t, p, fut)?
            }
        };
        Ok((t.add_row(delta, last)?, attention))
    }

    /// Serializes config, graph, layout, scaler, `metadata` and parameters.
    pub fn to_bytes(&self, metadata: serde_json::Value) -> Vec<u8> {
        let header = Header {
            model: self.config.clone(),
            topology: self.topology.clone(),
            layout: self.layout.clone(),
            scaler: self.scaler.clone(),
            metadata,
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        checkpoint::encode(&json, &self.params)
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(metadata)).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from checkpoint bytes; returns it with its metadata.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
        let (json, tensors) = checkpoint::decode(bytes).map_err(Error::ConfigMismatch)?;
        let h: Header =
            serde_json::from_str(&json).map_err(|e| Error::ConfigMismatch(format!("bad checkpoint header: {e}")))?;
        let graph = build_graph(&h.topology)?;
        let mut model = Model::new(h.model, &graph, h.layout, h.scaler)?;
        checkpoint::restore(&mut model.params, tensors)?;
        Ok((model, h.metadata))
    }

    pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::ConfigMismatch(m) => Error::ConfigMismatch(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint and rejects it unless it was produced by `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<(Model, serde_json::Value)> {
        let (model, meta) = Self::load(path)?;
        if model.config != *expected {
            return Err(Error::ConfigMismatch(format!(
                "{} was trained with a different model config",
                path.display()
            )));
        }
        Ok((model, meta))
    }
}

/// Row indices of the target nodes in a time-major `(steps·N)×d` matrix,
/// laid out time-major with `M` rows per step.
fn time_major_targets(steps: usize, n: usize, targets: &[usize]) -> Vec<usize> {
    (0..steps)
        .flat_map(|r| targets.iter().map(move |&tn| r * n + tn))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{windows_with_layout, TimeSeriesFrame};
    use crate::graph::{NodeKind, NodeSpec};
    use crate::synth::{generate, ScenarioConfig};

    struct Fixture {
        graph: StationGraph,
        layout: ChannelLayout,
        scaler: Scaler,
        samples: Vec<WindowedSample>,
    }

    fn fixture_for(cfg: &ScenarioConfig, w: usize, k: usize) -> Fixture {
        let frame = generate(cfg).unwrap();
        fixture_from_frame(&frame, build_graph(&cfg.topology).unwrap(), w, k)
    }

    fn fixture_from_frame(frame: &TimeSeriesFrame, graph: StationGraph, w: usize, k: usize) -> Fixture {
        let layout = ChannelLayout::new(&frame.channels, &graph).unwrap();
        let samples = windows_with_layout(frame, w, k, &layout).unwrap();
        let scaler = Scaler::fit(&samples, &layout).unwrap();
        Fixture {
            graph,
            layout,
            scaler,
            samples,
        }
    }

    fn small(arch: Architecture, w: usize, k: usize) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            w,
            k,
            hidden_dim: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_gcn_layers: 2,
            lstm_layers: 1,
            dropout: 0.0,
            use_future_covariates: true,
            seed: 3,
        }
    }

    fn model(fx: &Fixture, cfg: ModelConfig) -> Model {
        Model::new(cfg, &fx.graph, fx.layout.clone(), fx.scaler.clone()).unwrap()
    }

    #[test]
    fn every_architecture_emits_24_by_4_at_default_config() {
        let fx = fixture_for(&ScenarioConfig::causal(120, 1), 72, 24);
        for arch in Architecture::ALL {
            let f = model(&fx, ModelConfig::new(arch)).forward(&fx.samples[0]).unwrap();
            assert_eq!(f.y_hat.shape(), [24, 4], "{arch}");
            assert!(f.y_hat.all_finite(), "{arch}");
            assert_eq!(f.anchor, fx.samples[0].anchor);
        }
    }

    #[test]
    fn persistence_repeats_last_level() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 1), 12, 6);
        let s = &fx.samples[3];
        let f = model(&fx, small(Architecture::Persistence, 12, 6)).forward(s).unwrap();
        for m in 0..4 {
            let last = s.x_past.get(11, fx.layout.targets[m]);
            for j in 0..6 {
                assert!((f.y_hat.get(j, m) - last).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 2), 12, 6);
        for arch in Architecture::LEARNED {
            let a = model(&fx, small(arch, 12, 6));
            let b = model(&fx, small(arch, 12, 6));
            let fa = a.forward(&fx.samples[5]).unwrap();
            let fb = b.forward(&fx.samples[5]).unwrap();
            let again = a.forward(&fx.samples[5]).unwrap();
            assert_eq!(fa.y_hat.data(), fb.y_hat.data(), "{arch}");
            assert_eq!(fa.y_hat.data(), again.y_hat.data(), "{arch}");
        }
    }

    #[test]
    fn masked_models_ignore_true_future_covariates() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 2), 12, 6);
        for arch in Architecture::ALL {
            let cfg = ModelConfig {
                use_future_covariates: false,
                ..small(arch, 12, 6)
            };
            let m = model(&fx, cfg);
            let s = &fx.samples[7];
            let mut scrambled = s.clone();
            scrambled.x_cov_future = s.x_cov_future.map(|v| -3.0 * v + 11.0);
            let a = m.forward(s).unwrap();
            let b = m.forward(&scrambled).unwrap();
            assert_eq!(a.y_hat.data(), b.y_hat.data(), "{arch}");
        }
    }

    #[test]
    fn future_covariates_reach_the_output_when_enabled() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 2), 12, 6);
        for arch in Architecture::LEARNED {
            let m = model(&fx, small(arch, 12, 6));
            let s = &fx.samples[7];
            let mut scrambled = s.clone();
            scrambled.x_cov_future = s.x_cov_future.map(|v| -3.0 * v + 11.0);
            let a = m.forward(s).unwrap();
            let b = m.forward(&scrambled).unwrap();
            assert!(a.y_hat.max_abs_diff(&b.y_hat) > 1e-9, "{arch}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 4), 12, 6);
        for arch in Architecture::LEARNED {
            let mut m = model(&fx, small(arch, 12, 6));
            let s = m.prepare(&fx.samples[2]).unwrap();
            let mut s = s;
            // targets far from the forecast so every residual is nonzero
            s.y_true = s.y_true.map(|v| v + 5.0);
            m.accumulate_gradients(&s, 0).unwrap();
            for p in m.params().iter() {
                assert!(
                    p.grad.data().iter().any(|&g| g != 0.0),
                    "{arch}: {} has no gradient",
                    p.name
                );
            }
        }
    }

    #[test]
    fn eval_output_does_not_depend_on_dropout() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 4), 12, 6);
        let with = model(
            &fx,
            ModelConfig {
                dropout: 0.5,
                ..small(Architecture::Rnn, 12, 6)
            },
        );
        let without = model(
            &fx,
            ModelConfig {
                dropout: 0.0,
                ..small(Architecture::Rnn, 12, 6)
            },
        );
        let a = with.forward(&fx.samples[1]).unwrap();
        let b = without.forward(&fx.samples[1]).unwrap();
        assert_eq!(a.y_hat.data(), b.y_hat.data());
    }

    #[test]
    fn tcn_receptive_field_formula() {
        assert_eq!(tcn_receptive_field(6), 127);
        assert!(tcn_receptive_field(6) >= 72 + 24);
        assert!(tcn_receptive_field(5) < 72 + 24);
        assert_eq!(tcn_layers_for(96), 6);
        assert_eq!(tcn_layers_for(1), 0);
        for l in 0..10 {
            let rf: usize = 1 + (0..l).map(|i| 2 * (1usize << i)).sum::<usize>();
            assert_eq!(tcn_receptive_field(l), rf);
        }
    }

    #[test]
    fn tcn_output_sees_exactly_its_receptive_field() {
        // len 8 → 3 layers, receptive field 15: every input row matters;
        // perturbing the first row changes the output
        let fx = fixture_for(&ScenarioConfig::causal(40, 4), 5, 3);
        let m = model(&fx, small(Architecture::Tcn, 5, 3));
        let s = m.prepare(&fx.samples[0]).unwrap();
        let run = |s: &WindowedSample| {
            let mut t = Tape::new(Mode::Eval);
            let y = m.forward_normalized(&mut t, s).unwrap();
            t.value(y).clone()
        };
        let mut p = s.clone();
        p.x_past.set(0, 2, p.x_past.get(0, 2) + 1.0);
        assert!(run(&s).max_abs_diff(&run(&p)) > 0.0);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 5), 12, 6);
        let m = model(&fx, small(Architecture::GtnParallel, 12, 6));
        let table = m.extract_attention(&fx.samples[0]).unwrap();
        assert_eq!(table.weights.len(), 4);
        assert_eq!(table.channels.len(), fx.layout.covariate_count());
        for w in &table.weights {
            assert_eq!(w.shape(), [6, fx.layout.covariate_count()]);
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        for arch in Architecture::ALL
            .into_iter()
            .filter(|&a| a != Architecture::GtnParallel)
        {
            let err = model(&fx, small(arch, 12, 6))
                .extract_attention(&fx.samples[0])
                .unwrap_err();
            assert!(matches!(err, Error::NotSupported(_)), "{arch}");
        }
    }

    fn two_station_spec() -> TopologySpec {
        TopologySpec {
            targets: vec!["A".into(), "B".into()],
            edges: vec![("A".into(), "B".into()), ("B".into(), "T".into())],
            nodes: vec![
                NodeSpec::new("A", NodeKind::WaterLevelStation),
                NodeSpec::new("B", NodeKind::WaterLevelStation),
                NodeSpec::new("T", NodeKind::TideBoundary),
            ],
        }
    }

    #[test]
    fn single_covariate_attention_is_all_ones() {
        let mut cfg = ScenarioConfig::causal(60, 5);
        cfg.topology = two_station_spec();
        let fx = fixture_for(&cfg, 12, 6);
        assert_eq!(fx.layout.covariate_count(), 1);
        let m = model(&fx, small(Architecture::GtnParallel, 12, 6));
        let table = m.extract_attention(&fx.samples[0]).unwrap();
        for w in &table.weights {
            assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn covariate_ablation_changes_parallel_output() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 5), 12, 6);
        let mut m = model(&fx, small(Architecture::GtnParallel, 12, 6));
        let a = m.forward(&fx.samples[0]).unwrap();
        m.ablate_covariate_branch = true;
        let b = m.forward(&fx.samples[0]).unwrap();
        assert!(b.y_hat.all_finite());
        assert!(a.y_hat.max_abs_diff(&b.y_hat) > 1e-9);
    }

    #[test]
    fn series_is_invariant_to_node_ordering() {
        let cfg = ScenarioConfig::causal(60, 6);
        let frame = generate(&cfg).unwrap();
        let fx = fixture_from_frame(&frame, build_graph(&cfg.topology).unwrap(), 12, 6);

        // same river, nodes and channels listed in reverse
        let mut spec = cfg.topology.clone();
        spec.nodes.reverse();
        let order: Vec<usize> = (0..frame.channel_count()).rev().collect();
        let mut values = Tensor::zeros(frame.len(), order.len());
        for r in 0..frame.len() {
            for (j, &c) in order.iter().enumerate() {
                values.set(r, j, frame.values.get(r, c));
            }
        }
        let channels = order.iter().map(|&c| frame.channels[c].clone()).collect();
        let permuted = TimeSeriesFrame::new(frame.start, channels, values);
        let fy = fixture_from_frame(&permuted, build_graph(&spec).unwrap(), 12, 6);

        for arch in [Architecture::GtnSeries, Architecture::Gcn, Architecture::Persistence] {
            let a = model(&fx, small(arch, 12, 6)).forward(&fx.samples[4]).unwrap();
            let b = model(&fy, small(arch, 12, 6)).forward(&fy.samples[4]).unwrap();
            assert!(a.y_hat.max_abs_diff(&b.y_hat) < 1e-9, "{arch}");
        }
    }

    #[test]
    fn series_runs_on_a_single_station() {
        let mut cfg = ScenarioConfig::causal(40, 1);
        cfg.topology = TopologySpec {
            targets: vec!["A".into()],
            edges: vec![],
            nodes: vec![NodeSpec::new("A", NodeKind::WaterLevelStation)],
        };
        let fx = fixture_for(&cfg, 8, 4);
        assert_eq!(normalized_adjacency(&fx.graph).values, vec![1.0]);
        let f = model(&fx, small(Architecture::GtnSeries, 8, 4))
            .forward(&fx.samples[0])
            .unwrap();
        assert_eq!(f.y_hat.shape(), [4, 1]);
        assert!(f.y_hat.all_finite());
    }

    #[test]
    fn rejects_mismatched_samples_and_configs() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 1), 12, 6);
        let m = model(&fx, small(Architecture::Rnn, 10, 6));
        assert!(matches!(m.forward(&fx.samples[0]), Err(Error::Shape { .. })));
        let bad = ModelConfig {
            n_heads: 3,
            ..small(Architecture::GtnParallel, 12, 6)
        };
        assert!(Model::new(bad, &fx.graph, fx.layout.clone(), fx.scaler.clone()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let fx = fixture_for(&ScenarioConfig::causal(60, 1), 12, 6);
        let cfg = small(Architecture::GtnParallel, 12, 6);
        let m = model(&fx, cfg.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::json!({"epochs": 3})).unwrap();
        let (back, meta) = Model::load(&path).unwrap();
        assert_eq!(meta["epochs"], 3);
        let a = m.forward(&fx.samples[0]).unwrap();
        let b = back.forward(&fx.samples[0]).unwrap();
        assert_eq!(a.y_hat.data(), b.y_hat.data());
        assert!(Model::load_expecting(&path, &cfg).is_ok());
        let other = ModelConfig { hidden_dim: 16, ..cfg };
        assert!(matches!(
            Model::load_expecting(&path, &other),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn config_toml_uses_cli_names() {
        let cfg: ModelConfig = toml::from_str("architecture = \"gtn-series\"\nw = 48").unwrap();
        assert_eq!(cfg.architecture, Architecture::GtnSeries);
        assert_eq!((cfg.w, cfg.k, cfg.hidden_dim), (48, 24, 64));
        for a in Architecture::ALL {
            assert_eq!(Architecture::parse(a.name()), Some(a));
        }
    }
}
