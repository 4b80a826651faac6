//! Shared fixtures for the benchmarks in `benches/`.

use floodgtn::data::{windows_with_layout, ChannelLayout, Scaler, WindowedSample};
use floodgtn::graph::{build_graph, StationGraph};
use floodgtn::models::{Architecture, Model, ModelConfig};
use floodgtn::synth::{generate, ScenarioConfig};

/// Windows of a short causal scenario at the default `w=72, k=24`.
pub struct Fixture {
    pub graph: StationGraph,
    pub layout: ChannelLayout,
    pub scaler: Scaler,
    pub samples: Vec<WindowedSample>,
}

impl Fixture {
    pub fn new(hours: usize) -> Self {
        let sc = ScenarioConfig::causal(hours, 1);
        let frame = generate(&sc).expect("scenario generates");
        let graph = build_graph(&sc.topology).expect("bundled topology");
        let layout = ChannelLayout::new(&frame.channels, &graph).expect("layout");
        let cfg = ModelConfig::default();
        let samples = windows_with_layout(&frame, cfg.w, cfg.k, &layout).expect("windows");
        let scaler = Scaler::fit(&samples, &layout).expect("scaler");
        Fixture {
            graph,
            layout,
            scaler,
            samples,
        }
    }

    /// Default-dims model with dropout on, as trained.
    pub fn model(&self, arch: Architecture) -> Model {
        Model::new(
            ModelConfig::new(arch),
            &self.graph,
            self.layout.clone(),
            self.scaler.clone(),
        )
        .expect("model builds")
    }
}
