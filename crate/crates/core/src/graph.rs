//! River topology as an undirected station graph, plus the renormalized
//! adjacency operator used by graph convolutions.
//!
//! A topology file is TOML with three sections:
//!
//! ```toml
//! targets = ["S2", "S6"]
//! edges = [["S1", "S2"], ["S2", "S6"]]
//!
//! [[nodes]]
//! id = "S1"
//! kind = "water-level-station"   # gate | pump | rain-gauge | tide-boundary
//! ```
//!
//! Nodes may optionally list `channels = [...]`; the channel manifest of the
//! data file is authoritative for which channel belongs to which node.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The bundled topology: three tributaries, one main stem, four targets.
pub const DEFAULT_TOPOLOGY: &str = include_str!("../data/default_topology.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    WaterLevelStation,
    Gate,
    Pump,
    RainGauge,
    TideBoundary,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::WaterLevelStation => "water-level-station",
            NodeKind::Gate => "gate",
            NodeKind::Pump => "pump",
            NodeKind::RainGauge => "rain-gauge",
            NodeKind::TideBoundary => "tide-boundary",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            channels: Vec::new(),
        }
    }
}

/// Unvalidated topology description, as read from a topology file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub targets: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    pub nodes: Vec<NodeSpec>,
}

impl TopologySpec {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn bundled_default() -> Self {
        Self::from_toml(DEFAULT_TOPOLOGY).expect("bundled topology parses")
    }
}

/// A validated, immutable river graph.
#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    nodes: Vec<NodeSpec>,
    edges: Vec<(usize, usize)>,
    targets: Vec<String>,
    target_index: Vec<usize>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
}

/// Validates a topology: unique ids, declared edge endpoints, connectivity and
/// targets that name water-level stations. Duplicate and reversed edges collapse.
pub fn build_graph(spec: &TopologySpec) -> Result<StationGraph> {
    let mut index = HashMap::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        if index.insert(node.id.clone(), i).is_some() {
            return Err(Error::DuplicateNode(node.id.clone()));
        }
    }

    let n = spec.nodes.len();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    let mut neighbors = vec![Vec::new(); n];
    for (a, b) in &spec.edges {
        let ia = *index
            .get(a)
            .ok_or_else(|| Error::DanglingEndpoint(a.clone(), b.clone(), a.clone()))?;
        let ib = *index
            .get(b)
            .ok_or_else(|| Error::DanglingEndpoint(a.clone(), b.clone(), b.clone()))?;
        if ia == ib {
            // self-loops are added by the normalization anyway
            continue;
        }
        let key = (ia.min(ib), ia.max(ib));
        if seen.insert(key) {
            edges.push(key);
            neighbors[ia].push(ib);
            neighbors[ib].push(ia);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }

    if spec.targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let mut target_index = Vec::with_capacity(spec.targets.len());
    let mut target_seen = HashSet::new();
    for t in &spec.targets {
        let i = *index
            .get(t)
            .ok_or_else(|| Error::InvalidTarget(t.clone(), "not a declared node".into()))?;
        if spec.nodes[i].kind != NodeKind::WaterLevelStation {
            return Err(Error::InvalidTarget(
                t.clone(),
                format!("kind is {}, expected water-level-station", spec.nodes[i].kind),
            ));
        }
        if !target_seen.insert(i) {
            return Err(Error::InvalidTarget(t.clone(), "listed twice".into()));
        }
        target_index.push(i);
    }

    // connectivity by BFS from the first node
    let mut visited = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &neighbors[u] {
            if !visited[v] {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(lost) = visited.iter().position(|v| !v) {
        return Err(Error::Disconnected(
            spec.nodes[lost].id.clone(),
            spec.nodes[0].id.clone(),
        ));
    }

    Ok(StationGraph {
        nodes: spec.nodes.clone(),
        edges,
        targets: spec.targets.clone(),
        target_index,
        index,
        neighbors,
    })
}

impl StationGraph {
    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Undirected edges as `(lo, hi)` node-index pairs, in first-seen order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    /// Node indices of the targets, in target order.
    pub fn target_indices(&self) -> &[usize] {
        &self.target_index
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            targets: self.targets.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| (self.nodes[a].id.clone(), self.nodes[b].id.clone()))
                .collect(),
            nodes: self.nodes.clone(),
        }
    }

    pub fn bundled_default() -> Self {
        build_graph(&TopologySpec::bundled_default()).expect("bundled topology is valid")
    }
}

/// Dense, symmetric propagation operator with rows/columns in graph node order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    pub ordering: Vec<String>,
    pub values: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn dim(&self) -> usize {
        self.ordering.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    pub fn identity(ids: Vec<String>) -> Self {
        let n = ids.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        AdjacencyMatrix { ordering: ids, values }
    }
}

/// `D̃^(-1/2) (A + I) D̃^(-1/2)` with `D̃` the degree matrix of `A + I`.
pub fn normalized_adjacency(g: &StationGraph) -> AdjacencyMatrix {
    let n = g.node_count();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((g.neighbors(i).len() + 1) as f64).sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = inv_sqrt[i] * inv_sqrt[i];
        for &j in g.neighbors(i) {
            values[i * n + j] = inv_sqrt[i] * inv_sqrt[j];
        }
    }
    AdjacencyMatrix {
        ordering: g.nodes.iter().map(|n| n.id.clone()).collect(),
        values,
    }
}
