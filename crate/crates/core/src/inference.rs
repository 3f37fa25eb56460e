//! Pattern-position inference: each node is assigned the unit of its filter
//! with the highest score `S = F(x)·P(p_x | V, R_{L+1})`, top layer first.

use crate::error::{read_json, write_text, Error, Result};
use crate::fmap::{normalize_responses, Dataset, FeatureMapSet, Unit};
use crate::geom::Point;
use crate::graph::{ExplanatoryGraph, GraphLayer, NodeId, PatternNode};
use crate::learn::compat::{log_product_of, Observation, Resolved, UpperContext};
use crate::learn::em::{filter_entries, Entry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeAssignment {
    pub node_id: NodeId,
    /// `[d, i, j]` of the chosen unit; `None` when the filter had no entities.
    pub unit: Option<[usize; 3]>,
    /// Inferred position; falls back to μ_V when undetected.
    pub p: Point,
    pub score: f64,
    pub detected: bool,
}

impl NodeAssignment {
    pub fn observation(&self) -> Observation {
        Observation {
            p: self.p,
            score: self.score,
            detected: self.detected,
        }
    }

    fn undetected(node: &PatternNode) -> Self {
        NodeAssignment {
            node_id: node.id,
            unit: None,
            p: node.mu,
            score: 0.0,
            detected: false,
        }
    }
}

/// Best-scoring candidate; candidates are `(index within filter, p, F)` in
/// increasing index order, so the first maximum wins ties.
fn scan(
    node: &PatternNode,
    neighbors: &[Resolved],
    width: usize,
    candidates: impl Iterator<Item = (usize, Point, f64)>,
) -> NodeAssignment {
    let mut best: Option<(usize, Point, f64)> = None;
    // Log-domain runner-up guards against every linear score underflowing.
    let mut best_log: Option<(usize, Point, f64)> = None;
    for (idx, p, f) in candidates {
        if !(f > 0.0) {
            continue;
        }
        let log_dens = log_product_of(p, node.mu, neighbors);
        let s = f * log_dens.exp();
        if best.is_none_or(|b| s > b.2) {
            best = Some((idx, p, s));
        }
        let ls = f.ln() + log_dens;
        if best_log.is_none_or(|b| ls > b.2) {
            best_log = Some((idx, p, ls));
        }
    }
    let Some(linear) = best else {
        return NodeAssignment::undetected(node);
    };
    let (idx, p, score) = if linear.2 > 0.0 {
        linear
    } else {
        let (idx, p, _) = best_log.expect("set with linear");
        (idx, p, 0.0)
    };
    NodeAssignment {
        node_id: node.id,
        unit: Some([node.id.filter, idx / width, idx % width]),
        p,
        score,
        detected: true,
    }
}

fn resolve_all(node: &PatternNode, ctx: &UpperContext<'_>, image: usize) -> Result<Vec<Resolved>> {
    node.edges
        .iter()
        .map(|&e| ctx.resolve(image, e, node.sigma2))
        .collect()
}

/// Assigns `node` to the best of `units`, which must all belong to the
/// node's filter and be given in linear order.
pub fn assign_node(node: &PatternNode, units: &[Unit], ctx: &UpperContext<'_>, image: usize) -> Result<NodeAssignment> {
    if let Some(u) = units.iter().find(|u| u.d != node.id.filter) {
        return Err(Error::ShapeMismatch(format!(
            "unit of filter {} passed for node {}",
            u.d, node.id
        )));
    }
    let width = units.iter().map(|u| u.j + 1).max().unwrap_or(1);
    let neighbors = resolve_all(node, ctx, image)?;
    Ok(scan(node, &neighbors, width, units.iter().map(|u| (u.i * width + u.j, u.p, u.entities))))
}

/// Infers every node of one layer for one image.
pub fn infer_layer(
    layer: &GraphLayer,
    entries: &[Vec<Entry>],
    width: usize,
    ctx: &UpperContext<'_>,
    image: usize,
) -> Result<Vec<NodeAssignment>> {
    layer
        .nodes
        .iter()
        .map(|node| {
            let neighbors = resolve_all(node, ctx, image)?;
            let filter = entries.get(node.id.filter).map(|v| v.as_slice()).unwrap_or(&[]);
            Ok(scan(
                node,
                &neighbors,
                width,
                filter.iter().map(|e| (e.index as usize, e.p, e.weight)),
            ))
        })
        .collect()
}

/// Top-down inference over all graph layers. Result is indexed like
/// `graph.layers` (bottom to top), nodes in layer order.
pub fn infer_image(graph: &ExplanatoryGraph, set: &FeatureMapSet) -> Result<Vec<Vec<NodeAssignment>>> {
    let beta = graph.hyperparams.beta;
    let mut out: Vec<Vec<NodeAssignment>> = vec![Vec::new(); graph.layers.len()];
    for li in (0..graph.layers.len()).rev() {
        let layer = &graph.layers[li];
        let fm = set.layer(&layer.spec.layer_id).ok_or_else(|| Error::LayerMissingInImage {
            image_id: set.image_id.clone(),
            layer_id: layer.spec.layer_id.clone(),
        })?;
        if fm.meta.depth != layer.spec.filters {
            return Err(Error::ShapeMismatch(format!(
                "image {} layer {} has {} filters, graph has {}",
                set.image_id, layer.spec.layer_id, fm.meta.depth, layer.spec.filters
            )));
        }
        let entries = filter_entries(&normalize_responses(fm, beta), &fm.meta);
        let assignments = if li == graph.top() {
            infer_layer(layer, &entries, fm.meta.width, &UpperContext::dummy(1), 0)?
        } else {
            let obs = vec![out[li + 1].iter().map(NodeAssignment::observation).collect()];
            let ctx = UpperContext::from_layer(&graph.layers[li + 1], obs)?;
            infer_layer(layer, &entries, fm.meta.width, &ctx, 0)?
        };
        out[li] = assignments;
    }
    Ok(out)
}

/// `[image][layer][node]`, images in dataset order.
pub fn infer_dataset(graph: &ExplanatoryGraph, dataset: &Dataset) -> Result<Vec<Vec<Vec<NodeAssignment>>>> {
    dataset.images.par_iter().map(|set| infer_image(graph, set)).collect()
}

/// Smallest `K` such that the `K` largest scores hold at least `ratio` of
/// the total score.
pub fn top_k_energy(scores: &[f64], ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("energy ratio {ratio} outside (0, 1]")));
    }
    if scores.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite and nonnegative".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroScores);
    }
    let target = ratio * total;
    let mut acc = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        acc += s;
        if acc >= target {
            return Ok(k + 1);
        }
    }
    Ok(sorted.len())
}

/// One image's assignments flattened bottom to top.
pub fn inference_to_json(layers: &[Vec<NodeAssignment>]) -> String {
    let flat: Vec<&NodeAssignment> = layers.iter().flatten().collect();
    serde_json::to_string_pretty(&flat).expect("assignments serialize") + "\n"
}

pub fn write_inference(path: impl AsRef<Path>, layers: &[Vec<NodeAssignment>]) -> Result<()> {
    write_text(path.as_ref(), &inference_to_json(layers))
}

/// Reads a flat assignment list and regroups it by layer.
pub fn read_inference(path: impl AsRef<Path>, n_layers: usize) -> Result<Vec<Vec<NodeAssignment>>> {
    let flat: Vec<NodeAssignment> = read_json(path.as_ref())?;
    let mut layers = vec![Vec::new(); n_layers];
    for a in flat {
        let slot = layers.get_mut(a.node_id.layer).ok_or_else(|| {
            Error::ShapeMismatch(format!("assignment for node {} beyond {n_layers} layers", a.node_id))
        })?;
        slot.push(a);
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmap::{FeatureMap, LayerMeta};
    use crate::graph::{Edge, GraphLayer, Hyperparams, LayerSpec};

    fn units(fs: &[f64], width: usize) -> Vec<Unit> {
        fs.iter()
            .enumerate()
            .map(|(k, &f)| Unit {
                d: 0,
                i: k / width,
                j: k % width,
                p: Point::new((k % width) as f64 / width as f64, (k / width) as f64 / width as f64),
                f,
                entities: f,
            })
            .collect()
    }

    fn top_node(mu: Point) -> PatternNode {
        PatternNode {
            id: NodeId::new(0, 0, 0),
            mu,
            sigma2: 0.0025,
            edges: vec![Edge::Dummy],
        }
    }

    #[test]
    fn single_positive_unit_wins_even_far_away() {
        let us = units(&[0.0, 0.0, 0.0, 0.3], 2);
        let node = top_node(Point::new(0.0, 0.0));
        let a = assign_node(&node, &us, &UpperContext::dummy(1), 0).unwrap();
        assert!(a.detected);
        assert_eq!(a.unit, Some([0, 1, 1]));
        assert_eq!(a.p, us[3].p);

        // so far away that the linear score underflows
        let tiny = PatternNode {
            sigma2: 1e-4,
            ..top_node(Point::new(0.0, 0.0))
        };
        let far = vec![Unit {
            p: Point::new(1.0, 1.0),
            ..us[3]
        }];
        let a = assign_node(&tiny, &far, &UpperContext::dummy(1), 0).unwrap();
        assert!(a.detected);
        assert_eq!(a.unit, Some([0, 1, 1]));
    }

    #[test]
    fn score_is_entities_times_density() {
        // density 2.0 at the mean: σ² = 1/(4π)
        let node = PatternNode {
            sigma2: 1.0 / (4.0 * std::f64::consts::PI),
            ..top_node(Point::new(0.0, 0.0))
        };
        let a = assign_node(&node, &units(&[0.5], 1), &UpperContext::dummy(1), 0).unwrap();
        assert!((a.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silent_filter_is_undetected() {
        let node = top_node(Point::new(0.3, 0.3));
        let a = assign_node(&node, &units(&[0.0, -1.0], 2), &UpperContext::dummy(1), 0).unwrap();
        assert!(!a.detected);
        assert_eq!(a.p, node.mu);
        assert_eq!(a.unit, None);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut us = units(&[1.0, 0.0, 1.0], 3);
        us[0].p = Point::new(0.25, 0.5);
        us[2].p = Point::new(0.75, 0.5);
        let node = top_node(Point::new(0.5, 0.5));
        let a = assign_node(&node, &us, &UpperContext::dummy(1), 0).unwrap();
        assert_eq!(a.unit, Some([0, 0, 0]));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_energy(&[0.5, 0.3, 0.2], 0.3).unwrap(), 1);
        assert_eq!(top_k_energy(&[0.1; 10], 0.3).unwrap(), 3);
        assert_eq!(top_k_energy(&[0.4, 0.0, 0.1, 0.0, 0.2], 1.0).unwrap(), 3);
        assert!(matches!(top_k_energy(&[0.0, 0.0], 0.3), Err(Error::AllZeroScores)));
        assert!(top_k_energy(&[1.0], 0.0).is_err());
    }

    #[test]
    fn all_zero_image_is_undetected_everywhere() {
        let meta = LayerMeta::square("c", 2, 4, 56.0, 224.0);
        let layer = GraphLayer {
            spec: LayerSpec {
                layer_id: "c".into(),
                filters: 2,
                patterns_per_filter: 2,
            },
            nodes: (0..4)
                .map(|k| PatternNode {
                    id: NodeId::new(0, k / 2, k % 2),
                    mu: Point::new(0.5, 0.5),
                    sigma2: 0.01,
                    edges: vec![Edge::Dummy],
                })
                .collect(),
        };
        let graph = ExplanatoryGraph {
            hyperparams: Hyperparams::default(),
            layers: vec![layer],
        };
        let set = FeatureMapSet {
            image_id: "z".into(),
            maps: vec![FeatureMap::zeros("z", meta)],
        };
        let out = infer_image(&graph, &set).unwrap();
        assert!(out[0].iter().all(|a| !a.detected));
        let json = inference_to_json(&out);
        assert_eq!(json, inference_to_json(&infer_image(&graph, &set).unwrap()));
    }
}
