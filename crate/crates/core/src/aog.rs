//! A small And-Or graph for semantic part localization: each part is an OR
//! over templates, each template an AND over patterns retrieved from the
//! explanatory graph, each voting for the part center through a fixed
//! displacement.

use crate::error::{read_json, write_text, Error, Result};
use crate::geom::{Point, UNIT_DIAGONAL};
use crate::graph::{ExplanatoryGraph, NodeId};
use crate::inference::NodeAssignment;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Proximity bandwidth used for both retrieval and voting.
pub const PROXIMITY_R: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartAnnotation {
    pub image_id: String,
    pub part: String,
    pub center: Point,
    pub template: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePattern {
    pub node_id: NodeId,
    /// Part center minus the pattern position on the annotated image.
    pub delta: Point,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub image_id: String,
    pub patterns: Vec<TemplatePattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AogModel {
    pub part: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: f64,
    pub templates: Vec<Template>,
}

impl AogModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("aog serializes") + "\n"
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    /// Checks weights and that every node exists in `graph`.
    pub fn validate(&self, graph: &ExplanatoryGraph) -> Result<()> {
        if self.k == 0 || self.templates.is_empty() {
            return Err(Error::InvalidConfig("AOG needs K >= 1 and a template".into()));
        }
        for t in &self.templates {
            if t.patterns.iter().any(|p| !(p.weight >= 0.0)) || t.patterns.iter().all(|p| p.weight == 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "template from {} needs nonnegative, not all zero weights",
                    t.image_id
                )));
            }
            if let Some(p) = t.patterns.iter().find(|p| graph.node(p.node_id).is_none()) {
                return Err(Error::ShapeMismatch(format!("AOG pattern {} not in graph", p.node_id)));
            }
        }
        Ok(())
    }
}

/// `round(0.1·Σ_{L,d} N_{L,d})`, at least 1.
pub fn default_k(graph: &ExplanatoryGraph) -> usize {
    ((0.1 * graph.total_patterns() as f64).round() as usize).max(1)
}

fn proximity(a: Point, b: Point) -> f64 {
    (-a.dist_sq(b) / (2.0 * PROXIMITY_R * PROXIMITY_R)).exp()
}

/// One template per annotation, in template-index order. Each keeps the K
/// nodes with the highest `S·exp(−‖p_V − center‖²/(2r²))` on its image.
/// `inferences` maps image ids to `[layer][node]` assignments.
pub fn build_aog(
    graph: &ExplanatoryGraph,
    inferences: &BTreeMap<String, Vec<Vec<NodeAssignment>>>,
    annotations: &[PartAnnotation],
    k: usize,
) -> Result<AogModel> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let part = match annotations.first() {
        Some(a) => a.part.clone(),
        None => return Err(Error::InvalidConfig("no part annotations".into())),
    };
    if annotations.iter().any(|a| a.part != part) {
        return Err(Error::InvalidConfig("annotations name more than one part".into()));
    }
    let mut order: Vec<&PartAnnotation> = annotations.iter().collect();
    order.sort_by_key(|a| a.template);
    if order.iter().enumerate().any(|(i, a)| a.template != i) {
        return Err(Error::InvalidConfig("template indices must be 0..m, one annotation each".into()));
    }
    let total = graph.total_patterns();
    if k > total {
        log::warn!("K = {k} exceeds the graph's {total} patterns; keeping all");
    }
    let mut templates = Vec::with_capacity(order.len());
    for ann in order {
        let inf = inferences.get(&ann.image_id).ok_or_else(|| Error::LayerMissingInImage {
            image_id: ann.image_id.clone(),
            layer_id: "(inference)".into(),
        })?;
        if inf.len() != graph.layers.len() || inf.iter().zip(&graph.layers).any(|(a, l)| a.len() != l.nodes.len()) {
            return Err(Error::ShapeMismatch(format!(
                "inference of {} does not cover the graph",
                ann.image_id
            )));
        }
        let mut ranked: Vec<TemplatePattern> = inf
            .iter()
            .flatten()
            .filter(|a| a.detected)
            .map(|a| TemplatePattern {
                node_id: a.node_id,
                delta: ann.center - a.p,
                weight: a.score * proximity(a.p, ann.center),
            })
            .filter(|t| t.weight > 0.0)
            .collect();
        if ranked.is_empty() {
            return Err(Error::NoDetectedPatterns);
        }
        ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.node_id.cmp(&b.node_id)));
        ranked.truncate(k);
        templates.push(Template {
            image_id: ann.image_id.clone(),
            patterns: ranked,
        });
    }
    Ok(AogModel {
        part,
        k,
        r: PROXIMITY_R,
        templates,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub p: Point,
    pub template: usize,
    pub score: f64,
}

/// Every template votes `Σ w·(p_V + δ) / Σ w` over its detected patterns,
/// scored by vote agreement; the best template wins (ties: lowest index).
pub fn localize_part(aog: &AogModel, inference: &[Vec<NodeAssignment>]) -> Result<Localization> {
    let lookup = |id: NodeId| -> Option<&NodeAssignment> {
        inference
            .get(id.layer)?
            .iter()
            .find(|a| a.node_id == id)
            .filter(|a| a.detected)
    };
    let mut best: Option<Localization> = None;
    for (ti, t) in aog.templates.iter().enumerate() {
        let votes: Vec<(f64, Point)> = t
            .patterns
            .iter()
            .filter_map(|tp| lookup(tp.node_id).map(|a| (tp.weight, a.p + tp.delta)))
            .filter(|(w, _)| *w > 0.0)
            .collect();
        let w_sum: f64 = votes.iter().map(|v| v.0).sum();
        if !(w_sum > 0.0) {
            continue;
        }
        let mut acc = Point::ORIGIN;
        for (w, x) in &votes {
            acc += *x * *w;
        }
        let p = acc * (1.0 / w_sum);
        let score = votes
            .iter()
            .map(|(w, x)| w * (-x.dist_sq(p) / (2.0 * aog.r * aog.r)).exp())
            .sum();
        if best.is_none_or(|b| score > b.score) {
            best = Some(Localization { p, template: ti, score });
        }
    }
    best.ok_or(Error::NoDetectedPatterns)
}

/// `‖pred − gt‖ / √2`.
pub fn normalized_distance(pred: Point, gt: Point) -> f64 {
    pred.dist(gt) / UNIT_DIAGONAL
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationRow {
    pub image_id: String,
    pub part: String,
    pub result: Localization,
    pub norm_dist: Option<f64>,
}

pub fn localization_csv(rows: &[LocalizationRow]) -> String {
    let mut out = String::from("image_id,part,u,v,template,score,norm_dist\n");
    for r in rows {
        let d = r.norm_dist.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.image_id, r.part, r.result.p.u, r.result.p.v, r.result.template, r.result.score, d
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, GraphLayer, Hyperparams, LayerSpec, PatternNode};

    fn graph(n: usize) -> ExplanatoryGraph {
        ExplanatoryGraph {
            hyperparams: Hyperparams::new(0.1, 1, 20, 1.0),
            layers: vec![GraphLayer {
                spec: LayerSpec {
                    layer_id: "c".into(),
                    filters: 1,
                    patterns_per_filter: n,
                },
                nodes: (0..n)
                    .map(|k| PatternNode {
                        id: NodeId::new(0, 0, k),
                        mu: Point::new(0.5, 0.5),
                        sigma2: 0.01,
                        edges: vec![Edge::Dummy],
                    })
                    .collect(),
            }],
        }
    }

    fn assign(k: usize, p: Point, score: f64) -> NodeAssignment {
        NodeAssignment {
            node_id: NodeId::new(0, 0, k),
            unit: Some([0, 0, k]),
            p,
            score,
            detected: true,
        }
    }

    #[test]
    fn pattern_on_center_ranks_first() {
        let g = graph(2);
        let c = Point::new(0.4, 0.4);
        let inf = BTreeMap::from([("a".to_string(), vec![vec![assign(0, Point::new(0.6, 0.6), 1.0), assign(1, c, 1.0)]])]);
        let ann = [PartAnnotation {
            image_id: "a".into(),
            part: "head".into(),
            center: c,
            template: 0,
        }];
        let aog = build_aog(&g, &inf, &ann, 5).unwrap();
        let first = &aog.templates[0].patterns[0];
        assert_eq!(first.node_id, NodeId::new(0, 0, 1));
        assert_eq!(first.delta, Point::ORIGIN);
        assert_eq!(aog.templates[0].patterns.len(), 2);
        aog.validate(&g).unwrap();
    }

    #[test]
    fn consensus_votes() {
        let aog = AogModel {
            part: "head".into(),
            k: 2,
            r: PROXIMITY_R,
            templates: vec![Template {
                image_id: "a".into(),
                patterns: vec![
                    TemplatePattern {
                        node_id: NodeId::new(0, 0, 0),
                        delta: Point::new(0.1, 0.0),
                        weight: 0.5,
                    },
                    TemplatePattern {
                        node_id: NodeId::new(0, 0, 1),
                        delta: Point::new(0.0, 0.1),
                        weight: 0.25,
                    },
                ],
            }],
        };
        let inf = vec![vec![assign(0, Point::new(0.25, 0.5), 1.0), assign(1, Point::new(0.35, 0.4), 1.0)]];
        let loc = localize_part(&aog, &inf).unwrap();
        assert!(loc.p.dist(Point::new(0.35, 0.5)) < 1e-15);
        assert!((loc.score - 0.75).abs() < 1e-15);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(normalized_distance(Point::new(0.3, 0.3), Point::new(0.3, 0.3)), 0.0);
        assert!((normalized_distance(Point::new(0.0, 0.0), Point::new(1.0, 1.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vgg_shaped_k() {
        use crate::graph::{GraphLayer, LayerSpec};
        let layers = [40, 40, 20, 20]
            .iter()
            .enumerate()
            .map(|(li, &n)| GraphLayer {
                spec: LayerSpec {
                    layer_id: format!("conv{li}"),
                    filters: 512,
                    patterns_per_filter: n,
                },
                nodes: Vec::new(),
            })
            .collect();
        let g = ExplanatoryGraph {
            hyperparams: Hyperparams::default(),
            layers,
        };
        assert_eq!(default_k(&g), 6144);
    }

    #[test]
    fn nothing_detected() {
        let g = graph(1);
        let mut a = assign(0, Point::ORIGIN, 1.0);
        a.detected = false;
        let inf = BTreeMap::from([("a".to_string(), vec![vec![a]])]);
        let ann = [PartAnnotation {
            image_id: "a".into(),
            part: "head".into(),
            center: Point::ORIGIN,
            template: 0,
        }];
        assert!(matches!(build_aog(&g, &inf, &ann, 1), Err(Error::NoDetectedPatterns)));
    }
}
