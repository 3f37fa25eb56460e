//! Explanatory-graph data model, structural validation and JSON form.

use crate::geom::Point;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Variance floor in normalized units².
pub const SIGMA2_MIN: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {from} references missing node {to}")]
    DanglingEdge { from: NodeId, to: NodeId },
    #[error("node {from} edge to {to} does not target the layer directly above")]
    EdgeSkipsLayer { from: NodeId, to: NodeId },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {id} variance {sigma2} below floor {SIGMA2_MIN}")]
    SigmaBelowFloor { id: NodeId, sigma2: f64 },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GraphError {
    pub fn kind(&self) -> &'static str {
        match self {
            GraphError::DanglingEdge { .. } => "DanglingEdge",
            GraphError::EdgeSkipsLayer { .. } => "EdgeSkipsLayer",
            GraphError::DuplicateNode(_) => "DuplicateNode",
            GraphError::SigmaBelowFloor { .. } => "SigmaBelowFloor",
            GraphError::SchemaError(_) => "SchemaError",
            GraphError::Io { .. } => "IoError",
        }
    }
}

/// `(layer, filter, pattern)`; layers count upward from 0 at the bottom.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct NodeId {
    pub layer: usize,
    pub filter: usize,
    pub pattern: usize,
}

impl NodeId {
    pub const fn new(layer: usize, filter: usize, pattern: usize) -> Self {
        NodeId { layer, filter, pattern }
    }
}

impl From<[usize; 3]> for NodeId {
    fn from(a: [usize; 3]) -> Self {
        NodeId::new(a[0], a[1], a[2])
    }
}

impl From<NodeId> for [usize; 3] {
    fn from(n: NodeId) -> Self {
        [n.layer, n.filter, n.pattern]
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.filter, self.pattern)
    }
}

/// A neighbor reference: either a pattern in the layer above, or the fixed
/// zero-position parent shared by all top-layer patterns.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Edge {
    Dummy,
    Node(NodeId),
}

impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Edge::Dummy => s.serialize_str("dummy"),
            Edge::Node(id) => id.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Id([usize; 3]),
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == "dummy" => Ok(Edge::Dummy),
            Raw::Tag(t) => Err(de::Error::custom(format!("unknown edge tag {t:?}"))),
            Raw::Id(a) => Ok(Edge::Node(a.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternNode {
    pub id: NodeId,
    /// Prior position μ_V.
    pub mu: Point,
    /// Isotropic variance σ²_V.
    pub sigma2: f64,
    /// Neighbor set E_V in the layer above.
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub layer_id: String,
    /// D
    pub filters: usize,
    /// N_{L,d}, shared by all filters of the layer.
    pub patterns_per_filter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayer {
    pub spec: LayerSpec,
    /// Ordered by filter, then pattern: node `(d, k)` sits at `d·N + k`.
    pub nodes: Vec<PatternNode>,
}

impl GraphLayer {
    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        let n = self.spec.patterns_per_filter;
        (id.filter < self.spec.filters && id.pattern < n).then(|| id.filter * n + id.pattern)
    }

    pub fn node(&self, id: NodeId) -> Option<&PatternNode> {
        self.node_index(id).and_then(|k| self.nodes.get(k)).filter(|n| n.id == id)
    }

    /// Ω_{L,d}
    pub fn filter_nodes(&self, d: usize) -> &[PatternNode] {
        let n = self.spec.patterns_per_filter;
        &self.nodes[d * n..(d + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub tau: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub beta: f64,
    pub lambda: f64,
}

impl Hyperparams {
    pub fn new(tau: f64, m: usize, t: usize, beta: f64) -> Self {
        Hyperparams {
            tau,
            m,
            t,
            beta,
            lambda: 1.0 / m as f64,
        }
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams::new(0.1, 15, 20, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanatoryGraph {
    pub hyperparams: Hyperparams,
    /// Bottom to top.
    pub layers: Vec<GraphLayer>,
}

impl ExplanatoryGraph {
    pub fn node(&self, id: NodeId) -> Option<&PatternNode> {
        self.layers.get(id.layer).and_then(|l| l.node(id))
    }

    pub fn top(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn total_patterns(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.spec.filters * l.spec.patterns_per_filter)
            .sum()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let schema = |m: String| Err(GraphError::SchemaError(m));
        let hp = &self.hyperparams;
        if self.layers.is_empty() {
            return schema("graph has no layers".into());
        }
        if !(hp.tau > 0.0) || hp.m == 0 || !(hp.beta > 0.0) {
            return schema("hyperparameters require tau > 0, M >= 1, beta > 0".into());
        }
        if (hp.lambda * hp.m as f64 - 1.0).abs() > 1e-12 {
            return schema(format!("lambda {} is not 1/M for M = {}", hp.lambda, hp.m));
        }
        let mut seen = BTreeSet::new();
        for node in self.layers.iter().flat_map(|l| &l.nodes) {
            if !seen.insert(node.id) {
                return Err(GraphError::DuplicateNode(node.id));
            }
        }
        let top = self.top();
        for (li, layer) in self.layers.iter().enumerate() {
            let spec = &layer.spec;
            if spec.filters == 0 || spec.patterns_per_filter == 0 {
                return schema(format!("layer {} needs D >= 1 and N >= 1", spec.layer_id));
            }
            if layer.nodes.len() != spec.filters * spec.patterns_per_filter {
                return schema(format!(
                    "layer {} has {} nodes, expected D·N = {}",
                    spec.layer_id,
                    layer.nodes.len(),
                    spec.filters * spec.patterns_per_filter
                ));
            }
            for (k, node) in layer.nodes.iter().enumerate() {
                let expect = NodeId::new(li, k / spec.patterns_per_filter, k % spec.patterns_per_filter);
                if node.id != expect {
                    return schema(format!("node {} out of place, expected {expect}", node.id));
                }
                if !(node.sigma2 >= SIGMA2_MIN) || !node.sigma2.is_finite() {
                    return Err(GraphError::SigmaBelowFloor {
                        id: node.id,
                        sigma2: node.sigma2,
                    });
                }
                if !node.mu.is_finite() || !node.mu.in_unit_square() {
                    return schema(format!("node {} prior position outside [0,1]²", node.id));
                }
                self.validate_edges(li, top, node)?;
            }
        }
        Ok(())
    }

    fn validate_edges(&self, li: usize, top: usize, node: &PatternNode) -> Result<(), GraphError> {
        let m = self.hyperparams.m;
        if li == top {
            if node.edges != [Edge::Dummy] {
                return Err(GraphError::SchemaError(format!(
                    "top-layer node {} must link only to the dummy node",
                    node.id
                )));
            }
            return Ok(());
        }
        if node.edges.len() != m {
            return Err(GraphError::SchemaError(format!(
                "node {} has {} edges, expected M = {m}",
                node.id,
                node.edges.len()
            )));
        }
        let mut uniq = BTreeSet::new();
        for e in &node.edges {
            let to = match e {
                Edge::Dummy => {
                    return Err(GraphError::SchemaError(format!(
                        "non-top node {} links to the dummy node",
                        node.id
                    )))
                }
                Edge::Node(to) => *to,
            };
            if to.layer != li + 1 {
                return Err(GraphError::EdgeSkipsLayer { from: node.id, to });
            }
            if self.node(to).is_none() {
                return Err(GraphError::DanglingEdge { from: node.id, to });
            }
            if !uniq.insert(to) {
                return Err(GraphError::SchemaError(format!(
                    "node {} lists neighbor {to} twice",
                    node.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            version: SCHEMA_VERSION,
            hyperparams: self.hyperparams.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    layer_id: l.spec.layer_id.clone(),
                    d: l.spec.filters,
                    n: l.spec.patterns_per_filter,
                    nodes: l
                        .nodes
                        .iter()
                        .map(|n| NodeDoc {
                            id: n.id,
                            mu: n.mu,
                            sigma2: n.sigma2,
                            edges: n.edges.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes") + "\n"
    }

    /// Parses and validates a graph document.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::SchemaError(e.to_string()))?;
        if doc.version != SCHEMA_VERSION {
            return Err(GraphError::SchemaError(format!(
                "unsupported schema version {}",
                doc.version
            )));
        }
        let graph = ExplanatoryGraph {
            hyperparams: doc.hyperparams,
            layers: doc
                .layers
                .into_iter()
                .map(|l| GraphLayer {
                    spec: LayerSpec {
                        layer_id: l.layer_id,
                        filters: l.d,
                        patterns_per_filter: l.n,
                    },
                    nodes: l
                        .nodes
                        .into_iter()
                        .map(|n| PatternNode {
                            id: n.id,
                            mu: n.mu,
                            sigma2: n.sigma2,
                            edges: n.edges,
                        })
                        .collect(),
                })
                .collect(),
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ExplanatoryGraph::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    version: u32,
    hyperparams: Hyperparams,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    layer_id: String,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    mu: Point,
    sigma2: f64,
    edges: Vec<Edge>,
}
