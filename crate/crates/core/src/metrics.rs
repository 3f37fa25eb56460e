//! Location instability, top-inference retrieval and heat maps.

use crate::error::{read_json, write_text, Error, Result};
use crate::fmap::{normalize_responses, Dataset};
use crate::geom::{gauss2, Point, UNIT_DIAGONAL};
use crate::graph::{ExplanatoryGraph, GraphLayer, NodeId};
use crate::inference::{top_k_energy, NodeAssignment};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Parts whose distances enter the instability score.
pub const PARTS: [&str; 3] = ["head", "back", "tail"];

/// Side of the square patch cropped around a retrieved pattern, in pixels.
pub const PATCH_PX: f64 = 70.0;

/// `image_id → part → position`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet(pub BTreeMap<String, BTreeMap<String, Point>>);

impl LandmarkSet {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let set: LandmarkSet = read_json(path.as_ref())?;
        for (img, parts) in &set.0 {
            if let Some((part, _)) = parts.iter().find(|(_, p)| !p.is_finite() || !p.in_unit_square()) {
                return Err(Error::Parse {
                    path: path.as_ref().to_path_buf(),
                    message: format!("landmark {part} of image {img} outside [0,1]²"),
                });
            }
        }
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(
            path.as_ref(),
            &(serde_json::to_string_pretty(self).expect("landmarks serialize") + "\n"),
        )
    }

    pub fn get(&self, image_id: &str) -> Option<&BTreeMap<String, Point>> {
        self.0.get(image_id)
    }
}

/// Population standard deviation.
fn pop_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Mean over head, back and tail of the standard deviation of the
/// diagonal-normalized distance between a pattern and the landmark.
/// `samples` are `(image_id, p_V)` of detected assignments; images without
/// landmarks are skipped.
pub fn location_instability(samples: &[(&str, Point)], landmarks: &LandmarkSet) -> Result<f64> {
    let mut dists: [Vec<f64>; 3] = Default::default();
    for &(image_id, p) in samples {
        let Some(parts) = landmarks.get(image_id) else {
            continue;
        };
        for (k, part) in PARTS.iter().enumerate() {
            let l = parts.get(*part).ok_or_else(|| Error::MissingLandmark {
                image_id: image_id.to_string(),
                part: part.to_string(),
            })?;
            dists[k].push(p.dist(*l) / UNIT_DIAGONAL);
        }
    }
    let have = dists[0].len();
    if have < 2 {
        return Err(Error::InsufficientSamples { have, need: 2 });
    }
    Ok(dists.iter().map(|d| pop_std(d)).sum::<f64>() / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstabilityRow {
    pub node_id: NodeId,
    /// `None` when fewer than two images qualify.
    pub value: Option<f64>,
    pub n_images: usize,
}

/// Instability of every node. `inferences` is `[image][layer][node]`,
/// aligned with `image_ids`.
pub fn instability_table(
    graph: &ExplanatoryGraph,
    image_ids: &[String],
    inferences: &[Vec<Vec<NodeAssignment>>],
    landmarks: &LandmarkSet,
) -> Result<Vec<InstabilityRow>> {
    if image_ids.len() != inferences.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} image ids for {} inference sets",
            image_ids.len(),
            inferences.len()
        )));
    }
    let ids: Vec<(usize, usize, NodeId)> = graph
        .layers
        .iter()
        .enumerate()
        .flat_map(|(li, l)| l.nodes.iter().enumerate().map(move |(k, n)| (li, k, n.id)))
        .collect();
    ids.par_iter()
        .map(|&(li, k, node_id)| {
            let samples: Vec<(&str, Point)> = image_ids
                .iter()
                .zip(inferences)
                .filter_map(|(img, inf)| {
                    let a = inf.get(li)?.get(k)?;
                    (a.detected && landmarks.get(img).is_some()).then_some((img.as_str(), a.p))
                })
                .collect();
            let value = match location_instability(&samples, landmarks) {
                Ok(v) => Some(v),
                Err(Error::InsufficientSamples { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(InstabilityRow {
                node_id,
                value,
                n_images: samples.len(),
            })
        })
        .collect()
}

/// Mean over rows that have a value.
pub fn mean_instability(rows: &[InstabilityRow]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.value).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn instability_csv(rows: &[InstabilityRow]) -> String {
    let mut out = String::from("node_id,value,n_images\n");
    for r in rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.node_id, v, r.n_images);
    }
    out
}

pub fn write_instability(path: impl AsRef<Path>, rows: &[InstabilityRow]) -> Result<()> {
    write_text(path.as_ref(), &instability_csv(rows))
}

/// Position of the strongest unit of every filter of `layer_id`, per image
/// (`[filter][image]`); `None` where the filter is silent. Ties go to the
/// lowest linear index.
pub fn raw_filter_peaks(dataset: &Dataset, layer_id: &str) -> Result<Vec<Vec<Option<Point>>>> {
    let per_image: Vec<Vec<Option<Point>>> = dataset
        .images
        .par_iter()
        .map(|set| {
            let fm = set.layer(layer_id).ok_or_else(|| Error::LayerMissingInImage {
                image_id: set.image_id.clone(),
                layer_id: layer_id.to_string(),
            })?;
            let units = normalize_responses(fm, 1.0);
            let per = fm.meta.units_per_filter();
            Ok(units
                .chunks(per)
                .map(|filter| {
                    let mut best: Option<(f64, Point)> = None;
                    for u in filter.iter().filter(|u| u.entities > 0.0) {
                        if best.is_none_or(|b| u.entities > b.0) {
                            best = Some((u.entities, u.p));
                        }
                    }
                    best.map(|b| b.1)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let depth = per_image.first().map_or(0, |v| v.len());
    Ok((0..depth).map(|d| per_image.iter().map(|img| img[d]).collect()).collect())
}

/// Instability of the raw-filter-peak baseline, one value per filter with
/// at least two usable images.
pub fn baseline_instability(dataset: &Dataset, layer_id: &str, landmarks: &LandmarkSet) -> Result<Vec<f64>> {
    let ids = dataset.image_ids();
    let mut out = Vec::new();
    for peaks in raw_filter_peaks(dataset, layer_id)? {
        let samples: Vec<(&str, Point)> = ids
            .iter()
            .zip(&peaks)
            .filter_map(|(id, p)| p.map(|p| (id.as_str(), p)))
            .collect();
        match location_instability(&samples, landmarks) {
            Ok(v) => out.push(v),
            Err(Error::InsufficientSamples { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopInference {
    pub image_id: String,
    pub p: Point,
    pub score: f64,
}

/// Images holding the top `ratio` of a node's inference energy, strongest
/// first (ties in image order). `samples` is `(image_id, assignment)`.
pub fn select_top_inferences(samples: &[(&str, &NodeAssignment)], ratio: f64) -> Result<Vec<TopInference>> {
    let scores: Vec<f64> = samples.iter().map(|(_, a)| if a.detected { a.score } else { 0.0 }).collect();
    let k = top_k_energy(&scores, ratio)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| TopInference {
            image_id: samples[i].0.to_string(),
            p: samples[i].1.p,
            score: scores[i],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePatches {
    pub node_id: NodeId,
    /// Side of the crop around each `p`, in image pixels.
    pub patch_px: f64,
    pub patches: Vec<TopInference>,
}

/// Top inferences of every node with a nonzero score; `inferences` is
/// `[image][layer][node]`.
pub fn collect_patches(
    graph: &ExplanatoryGraph,
    image_ids: &[String],
    inferences: &[Vec<Vec<NodeAssignment>>],
    ratio: f64,
) -> Result<Vec<NodePatches>> {
    let mut out = Vec::new();
    for (li, layer) in graph.layers.iter().enumerate() {
        for (k, node) in layer.nodes.iter().enumerate() {
            let samples: Vec<(&str, &NodeAssignment)> = image_ids
                .iter()
                .zip(inferences)
                .map(|(id, inf)| (id.as_str(), &inf[li][k]))
                .collect();
            match select_top_inferences(&samples, ratio) {
                Ok(patches) => out.push(NodePatches {
                    node_id: node.id,
                    patch_px: PATCH_PX,
                    patches,
                }),
                Err(Error::AllZeroScores) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub fn write_patches(path: impl AsRef<Path>, patches: &[NodePatches]) -> Result<()> {
    write_text(
        path.as_ref(),
        &(serde_json::to_string_pretty(patches).expect("patches serialize") + "\n"),
    )
}

/// Heat map on a `grid × grid` raster (row-major, rows along v): the sum of
/// `S·N(cell center | p_V, σ²_V)` over the top half (by S) of the layer's
/// detected nodes. Values are point densities at cell centers.
pub fn render_heatmap(layer: &GraphLayer, assignments: &[NodeAssignment], grid: usize) -> Result<Vec<f64>> {
    if grid == 0 {
        return Err(Error::InvalidConfig("heat-map grid must be at least 1".into()));
    }
    let mut detected: Vec<(&NodeAssignment, f64)> = assignments
        .iter()
        .filter(|a| a.detected)
        .map(|a| {
            let node = layer
                .node(a.node_id)
                .ok_or_else(|| Error::ShapeMismatch(format!("assignment for unknown node {}", a.node_id)))?;
            Ok((a, node.sigma2))
        })
        .collect::<Result<_>>()?;
    detected.sort_by(|x, y| y.0.score.total_cmp(&x.0.score).then(x.0.node_id.cmp(&y.0.node_id)));
    detected.truncate(detected.len().div_ceil(2));
    let mut out = vec![0.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let c = Point::new((j as f64 + 0.5) / grid as f64, (i as f64 + 0.5) / grid as f64);
            out[i * grid + j] = detected.iter().map(|(a, s2)| a.score * gauss2(c, a.p, *s2)).sum();
        }
    }
    Ok(out)
}

/// ASCII PGM (P2), scaled so the maximum maps to 255.
pub fn heatmap_pgm(values: &[f64], grid: usize) -> String {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{grid} {grid}\n255\n");
    for row in values.chunks(grid) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (level as u8).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn heatmap_csv(values: &[f64], grid: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(grid) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, LayerSpec, PatternNode};

    fn landmarks(rows: &[(&str, [f64; 6])]) -> LandmarkSet {
        LandmarkSet(
            rows.iter()
                .map(|(id, v)| {
                    let parts = PARTS
                        .iter()
                        .enumerate()
                        .map(|(k, p)| (p.to_string(), Point::new(v[2 * k], v[2 * k + 1])))
                        .collect();
                    (id.to_string(), parts)
                })
                .collect(),
        )
    }

    #[test]
    fn constant_distances_are_stable() {
        let lm = landmarks(&[("a", [0.5, 0.5, 0.6, 0.5, 0.5, 0.7]), ("b", [0.6, 0.6, 0.7, 0.6, 0.6, 0.8])]);
        let v = location_instability(&[("a", Point::new(0.2, 0.2)), ("b", Point::new(0.3, 0.3))], &lm).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn mean_of_three_stds() {
        // pattern at the origin, landmarks on the u axis: distances d·√2 give
        // normalized distances d; two images at ±s around a mean give std s
        let r = UNIT_DIAGONAL;
        let lm = landmarks(&[
            ("a", [0.2 * r, 0.0, 0.2 * r, 0.0, 0.2 * r, 0.0]),
            ("b", [0.4 * r, 0.0, 0.6 * r, 0.0, 0.8 * r, 0.0]),
        ]);
        let samples = [("a", Point::ORIGIN), ("b", Point::ORIGIN)];
        let v = location_instability(&samples, &lm).unwrap();
        assert!((v - 0.2).abs() < 1e-12, "{v}");
        assert!(matches!(
            location_instability(&samples[..1], &lm),
            Err(Error::InsufficientSamples { have: 1, need: 2 })
        ));
    }

    fn assignment(k: usize, p: Point, score: f64) -> NodeAssignment {
        NodeAssignment {
            node_id: NodeId::new(0, 0, k),
            unit: Some([0, 0, 0]),
            p,
            score,
            detected: score > 0.0,
        }
    }

    #[test]
    fn top_inferences_follow_energy() {
        let a = [assignment(0, Point::ORIGIN, 0.2), assignment(0, Point::ORIGIN, 0.5), assignment(0, Point::ORIGIN, 0.3)];
        let samples: Vec<(&str, &NodeAssignment)> = ["x", "y", "z"].into_iter().zip(a.iter()).collect();
        let top = select_top_inferences(&samples, 0.3).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].image_id, "y");
        let all = select_top_inferences(&samples, 1.0).unwrap();
        let ids: Vec<&str> = all.iter().map(|t| t.image_id.as_str()).collect();
        assert_eq!(ids, ["y", "z", "x"]);
    }

    fn layer(n: usize, sigma2: f64) -> GraphLayer {
        GraphLayer {
            spec: LayerSpec {
                layer_id: "c".into(),
                filters: 1,
                patterns_per_filter: n,
            },
            nodes: (0..n)
                .map(|k| PatternNode {
                    id: NodeId::new(0, 0, k),
                    mu: Point::new(0.5, 0.5),
                    sigma2,
                    edges: vec![Edge::Dummy],
                })
                .collect(),
        }
    }

    #[test]
    fn heatmap_peak_and_zero() {
        let l = layer(1, 0.01);
        // grid 3: the center cell's center is (0.5, 0.5)
        let h = render_heatmap(&l, &[assignment(0, Point::new(0.5, 0.5), 1.0)], 3).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI * 0.01);
        assert!((h[4] - peak).abs() < 1e-9);
        let h = render_heatmap(&l, &[assignment(0, Point::new(0.5, 0.5), 0.0)], 3).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(heatmap_pgm(&h, 3).starts_with("P2\n3 3\n255\n0 0 0\n"));
    }

    #[test]
    fn heatmap_keeps_top_half() {
        let l = layer(3, 0.01);
        let a = [
            assignment(0, Point::new(0.1, 0.1), 1.0),
            assignment(1, Point::new(0.9, 0.9), 0.5),
            assignment(2, Point::new(0.5, 0.5), 0.1),
        ];
        let h = render_heatmap(&l, &a, 8).unwrap();
        let first = render_heatmap(&l, &a[..1], 8).unwrap();
        let second = render_heatmap(&l, &a[1..2], 8).unwrap();
        for k in 0..64 {
            assert_eq!(h[k], first[k] + second[k]);
        }
    }
}
