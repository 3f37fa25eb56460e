//! Planted explanatory graphs and feature maps sampled from them, used as
//! ground truth for learning, inference and localization.

use crate::error::{write_text, Error, Result};
use crate::fmap::{project_position, write_fmap, Dataset, FeatureMap, FeatureMapSet, LayerMeta, Manifest, ManifestEntry, ManifestLayer};
use crate::geom::Point;
use crate::graph::{Edge, ExplanatoryGraph, GraphLayer, Hyperparams, LayerSpec, NodeId, PatternNode};
use crate::learn::config::LayersFile;
use crate::learn::LearnConfig;
use crate::metrics::LandmarkSet;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLayer {
    pub layer_id: String,
    #[serde(rename = "D")]
    pub filters: usize,
    /// Square grid side `H = W`.
    pub grid: usize,
    pub stride_px: f64,
    #[serde(rename = "N")]
    pub patterns_per_filter: usize,
}

impl SynthLayer {
    pub fn meta(&self, image_px: f64) -> LayerMeta {
        LayerMeta::square(&self.layer_id, self.filters, self.grid, self.stride_px, image_px)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Bottom to top.
    pub layers: Vec<SynthLayer>,
    pub image_px: f64,
    /// Planted neighbors per non-top pattern.
    #[serde(rename = "M")]
    pub m: usize,
    /// Range of planted σ*².
    pub sigma2_range: [f64; 2],
    /// Range of planted μ* on both axes.
    pub mu_range: [f64; 2],
    /// Lower bound on the distance between patterns of one filter, on top
    /// of the `3·max σ*` rule. Bumps are a grid step wide, so patterns
    /// closer than that merge in the maps.
    pub min_separation: f64,
    /// Std of the per-image object displacement.
    pub jitter: f64,
    /// Expected noise peaks per filter per image; the fractional part is
    /// a Bernoulli draw.
    pub noise_peaks: f64,
    pub peak_amplitude: [f64; 2],
    pub noise_amplitude: [f64; 2],
    /// Bumps are drawn out to this many render widths.
    pub render_radius: f64,
    /// Object landmarks, displaced with the object.
    pub landmarks: BTreeMap<String, Point>,
    pub n_images: usize,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layers: vec![
                SynthLayer {
                    layer_id: "conv_a".into(),
                    filters: 10,
                    grid: 28,
                    stride_px: 8.0,
                    patterns_per_filter: 3,
                },
                SynthLayer {
                    layer_id: "conv_b".into(),
                    filters: 10,
                    grid: 14,
                    stride_px: 16.0,
                    patterns_per_filter: 3,
                },
            ],
            image_px: 224.0,
            m: 2,
            sigma2_range: [1e-4, 4e-4],
            mu_range: [0.2, 0.8],
            min_separation: 0.25,
            jitter: 0.05,
            noise_peaks: noise_peaks_for_fraction(0.3, 3),
            peak_amplitude: [0.5, 1.0],
            noise_amplitude: [0.2, 0.6],
            render_radius: 3.0,
            landmarks: [("head", 0.3, 0.35), ("back", 0.5, 0.5), ("tail", 0.7, 0.6)]
                .into_iter()
                .map(|(k, u, v)| (k.to_string(), Point::new(u, v)))
                .collect(),
            n_images: 200,
            rng_seed: 0,
        }
    }
}

/// Noise peaks per filter such that `fraction` of all peaks are noise when
/// each filter carries `patterns` part peaks.
pub fn noise_peaks_for_fraction(fraction: f64, patterns: usize) -> f64 {
    patterns as f64 * fraction / (1.0 - fraction)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.layers.is_empty() {
            return fail("synthetic spec needs at least one layer");
        }
        for l in &self.layers {
            if l.filters == 0 || l.grid == 0 || l.patterns_per_filter == 0 || !(l.stride_px > 0.0) {
                return fail("layer D, grid, N and stride must be positive");
            }
        }
        if self.m == 0 {
            return fail("M must be at least 1");
        }
        if self.layers.len() > 1 {
            let smallest_upper = self.layers[1..]
                .iter()
                .map(|l| l.filters * l.patterns_per_filter)
                .min()
                .unwrap_or(0);
            if smallest_upper < self.m {
                return fail("an upper layer has fewer patterns than M");
            }
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.sigma2_range) || self.sigma2_range[0] < crate::graph::SIGMA2_MIN {
            return fail("sigma2_range must be ordered and at least the variance floor");
        }
        if !ordered(self.mu_range) || self.mu_range[0] < 0.0 || self.mu_range[1] > 1.0 {
            return fail("mu_range must lie in [0, 1]");
        }
        if !ordered(self.peak_amplitude) || !ordered(self.noise_amplitude) || self.peak_amplitude[0] <= 0.0 {
            return fail("amplitude ranges must be ordered and positive");
        }
        if !(self.jitter >= 0.0) || !(self.noise_peaks >= 0.0) || !(self.render_radius > 0.0) {
            return fail("jitter, noise_peaks and render_radius must be nonnegative");
        }
        if self.n_images == 0 {
            return fail("n_images must be at least 1");
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                layer_id: l.layer_id.clone(),
                filters: l.filters,
                patterns_per_filter: l.patterns_per_filter,
            })
            .collect()
    }

    /// `layers.json` to learn this dataset with `config`.
    pub fn layers_file(&self, config: &LearnConfig) -> LayersFile {
        LayersFile::from_specs(&self.layer_specs(), config)
    }
}

/// Samples planted μ*, σ*² and edges. Positions within a filter are at
/// least `max(3·max σ*, min_separation)` apart.
pub fn gen_planted_graph(spec: &SynthSpec) -> Result<ExplanatoryGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let max_sigma = spec.sigma2_range[1].sqrt();
    let separation = (3.0 * max_sigma).max(spec.min_separation);
    let top = spec.layers.len() - 1;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (li, sl) in spec.layers.iter().enumerate() {
        let mut nodes = Vec::with_capacity(sl.filters * sl.patterns_per_filter);
        for d in 0..sl.filters {
            let mus = place_separated(&mut rng, sl.patterns_per_filter, spec.mu_range, separation).ok_or(
                Error::SeparationUnsatisfiable {
                    layer: li,
                    filter: d,
                    attempts: MAX_ATTEMPTS,
                },
            )?;
            for (k, mu) in mus.into_iter().enumerate() {
                let sigma2 = rng.random_range(spec.sigma2_range[0]..=spec.sigma2_range[1]);
                let edges = if li == top {
                    vec![Edge::Dummy]
                } else {
                    let upper = &spec.layers[li + 1];
                    let n_up = upper.patterns_per_filter;
                    let mut edges: Vec<Edge> = index::sample(&mut rng, upper.filters * n_up, spec.m)
                        .into_iter()
                        .map(|x| Edge::Node(NodeId::new(li + 1, x / n_up, x % n_up)))
                        .collect();
                    edges.sort();
                    edges
                };
                nodes.push(PatternNode {
                    id: NodeId::new(li, d, k),
                    mu,
                    sigma2,
                    edges,
                });
            }
        }
        layers.push(GraphLayer {
            spec: LayerSpec {
                layer_id: sl.layer_id.clone(),
                filters: sl.filters,
                patterns_per_filter: sl.patterns_per_filter,
            },
            nodes,
        });
    }
    let graph = ExplanatoryGraph {
        hyperparams: Hyperparams::new(0.1, spec.m, 20, 1.0),
        layers,
    };
    graph.validate()?;
    Ok(graph)
}

fn place_separated(rng: &mut ChaCha8Rng, n: usize, range: [f64; 2], sep: f64) -> Option<Vec<Point>> {
    for _ in 0..MAX_ATTEMPTS {
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.random_range(range[0]..=range[1]), rng.random_range(range[0]..=range[1])))
            .collect();
        let ok = (0..n).all(|a| (a + 1..n).all(|b| pts[a].dist(pts[b]) >= sep));
        if ok {
            return Some(pts);
        }
    }
    None
}

/// Ground truth for one sampled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageTruth {
    pub image_id: String,
    pub jitter: Point,
    /// True bump centers, in graph node order, bottom layer first.
    pub positions: Vec<PlantedPosition>,
    pub landmarks: BTreeMap<String, Point>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedPosition {
    pub node_id: NodeId,
    pub p: Point,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub truth: Vec<ImageTruth>,
}

impl SynthDataset {
    pub fn landmarks(&self) -> LandmarkSet {
        LandmarkSet(
            self.truth
                .iter()
                .map(|t| (t.image_id.clone(), t.landmarks.clone()))
                .collect(),
        )
    }
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

/// Renders `spec.n_images` images from the planted graph. Each image uses
/// its own RNG stream, so the result does not depend on thread count.
pub fn sample_images(planted: &ExplanatoryGraph, spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    if planted.layers.len() != spec.layers.len()
        || planted
            .layers
            .iter()
            .zip(&spec.layers)
            .any(|(g, s)| g.spec.filters != s.filters || g.spec.patterns_per_filter != s.patterns_per_filter)
    {
        return Err(Error::ShapeMismatch("planted graph does not match the synthetic spec".into()));
    }
    let metas: Vec<LayerMeta> = spec.layers.iter().map(|l| l.meta(spec.image_px)).collect();
    let out: Vec<(FeatureMapSet, ImageTruth)> = (0..spec.n_images)
        .into_par_iter()
        .map(|i| sample_one(planted, spec, &metas, i))
        .collect::<Result<_>>()?;
    let (images, truth) = out.into_iter().unzip();
    Ok(SynthDataset {
        dataset: Dataset { images },
        truth,
    })
}

fn sample_one(planted: &ExplanatoryGraph, spec: &SynthSpec, metas: &[LayerMeta], index: usize) -> Result<(FeatureMapSet, ImageTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64 + 1);
    let id = image_id(index);
    let std = |s: f64| Normal::new(0.0, s).expect("finite std");
    let jitter = Point::new(std(spec.jitter).sample(&mut rng), std(spec.jitter).sample(&mut rng));
    let mut positions = Vec::new();
    let mut maps = Vec::with_capacity(metas.len());
    for (layer, meta) in planted.layers.iter().zip(metas) {
        let mut fm = FeatureMap::zeros(id.clone(), meta.clone());
        let sigma_r = meta.step_normalized();
        for node in &layer.nodes {
            let s = node.sigma2.sqrt();
            let p = node.mu + jitter + Point::new(std(s).sample(&mut rng), std(s).sample(&mut rng));
            let amp = rng.random_range(spec.peak_amplitude[0]..=spec.peak_amplitude[1]);
            render_bump(&mut fm, node.id.filter, p, amp, sigma_r, spec.render_radius)?;
            positions.push(PlantedPosition { node_id: node.id, p });
        }
        for d in 0..meta.depth {
            let whole = spec.noise_peaks.floor();
            let extra = rng.random_bool(spec.noise_peaks - whole);
            let count = whole as usize + usize::from(extra);
            for _ in 0..count {
                let p = Point::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                let amp = rng.random_range(spec.noise_amplitude[0]..=spec.noise_amplitude[1]);
                render_bump(&mut fm, d, p, amp, sigma_r, spec.render_radius)?;
            }
        }
        maps.push(fm);
    }
    let landmarks = spec
        .landmarks
        .iter()
        .map(|(k, &p)| (k.clone(), (p + jitter).clamp_unit()))
        .collect();
    Ok((
        FeatureMapSet {
            image_id: id.clone(),
            maps,
        },
        ImageTruth {
            image_id: id,
            jitter,
            positions,
            landmarks,
        },
    ))
}

/// Adds `amp·exp(−‖p_unit − center‖²/(2σ_r²))` to every unit of filter `d`
/// within `radius·σ_r` of the center.
fn render_bump(fm: &mut FeatureMap, d: usize, center: Point, amp: f64, sigma_r: f64, radius: f64) -> Result<()> {
    let (h, w) = (fm.meta.height, fm.meta.width);
    let cutoff = (radius * sigma_r).powi(2);
    for i in 0..h {
        for j in 0..w {
            let p = project_position(i, j, &fm.meta)?;
            let r2 = p.dist_sq(center);
            if r2 <= cutoff {
                let k = fm.meta.linear_index(d, i, j);
                fm.values[k] += (amp * (-r2 / (2.0 * sigma_r * sigma_r)).exp()) as f32;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub planted: NodeId,
    pub learned: NodeId,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub matches: Vec<PatternMatch>,
    pub mean_error: f64,
    /// Fraction of planted patterns matched within the threshold.
    pub rate: f64,
}

pub const RECOVERY_THRESHOLD: f64 = 0.02;

/// Matches planted to learned patterns per filter, minimizing the summed
/// μ distance (exhaustive for `N ≤ 6`, greedy closest-pair otherwise).
pub fn recovery_error(planted: &ExplanatoryGraph, learned: &ExplanatoryGraph, threshold: f64) -> Result<Recovery> {
    if planted.layers.len() != learned.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} planted layers vs {} learned",
            planted.layers.len(),
            learned.layers.len()
        )));
    }
    let mut matches = Vec::new();
    for (pl, ll) in planted.layers.iter().zip(&learned.layers) {
        if pl.spec.filters != ll.spec.filters || pl.spec.patterns_per_filter != ll.spec.patterns_per_filter {
            return Err(Error::ShapeMismatch(format!(
                "layer {} shape differs from learned {}",
                pl.spec.layer_id, ll.spec.layer_id
            )));
        }
        for d in 0..pl.spec.filters {
            let a = pl.filter_nodes(d);
            let b = ll.filter_nodes(d);
            let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x.mu.dist(y.mu)).collect()).collect();
            let assignment = if a.len() <= 6 {
                match_exhaustive(&cost)
            } else {
                match_greedy(&cost)
            };
            for (ka, kb) in assignment.into_iter().enumerate() {
                matches.push(PatternMatch {
                    planted: a[ka].id,
                    learned: b[kb].id,
                    error: cost[ka][kb],
                });
            }
        }
    }
    let n = matches.len().max(1) as f64;
    let mean_error = matches.iter().map(|m| m.error).sum::<f64>() / n;
    let rate = matches.iter().filter(|m| m.error < threshold).count() as f64 / n;
    Ok(Recovery {
        matches,
        mean_error,
        rate,
    })
}

/// Permutation minimizing the total cost; `result[row] = column`.
pub fn match_exhaustive(cost: &[Vec<f64>]) -> Vec<usize> {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == cost.len() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] && acc + cost[row][c] < best.0 {
                used[c] = true;
                cur.push(c);
                go(cost, row + 1, used, cur, acc + cost[row][c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    let cols = cost.first().map_or(0, |r| r.len());
    go(cost, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best.1
}

/// Repeatedly pairs the closest remaining row and column.
pub fn match_greedy(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut result = vec![usize::MAX; n];
    let mut col_used = vec![false; cost.first().map_or(0, |r| r.len())];
    for _ in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for (r, row) in cost.iter().enumerate() {
            if result[r] != usize::MAX {
                continue;
            }
            for (c, &v) in row.iter().enumerate() {
                if !col_used[c] && best.is_none_or(|b| v < b.0) {
                    best = Some((v, r, c));
                }
            }
        }
        let (_, r, c) = best.expect("square cost matrix");
        result[r] = c;
        col_used[c] = true;
    }
    result
}

#[derive(Serialize, Deserialize)]
struct TruthFile {
    graph: serde_json::Value,
    images: Vec<ImageTruth>,
}

/// Writes `manifest.json`, one `.fmap` per image and layer under `fmaps/`,
/// `truth.json`, `landmarks.json`, `layers.json` and `synth.json`.
pub fn write_synthetic(dir: impl AsRef<Path>, spec: &SynthSpec, planted: &ExplanatoryGraph, data: &SynthDataset, config: &LearnConfig) -> Result<()> {
    let dir = dir.as_ref();
    let fdir = dir.join("fmaps");
    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut manifest: Manifest = Vec::with_capacity(data.dataset.images.len());
    for set in &data.dataset.images {
        let mut layers = Vec::with_capacity(set.maps.len());
        for fm in &set.maps {
            let rel = format!("fmaps/{}_{}.fmap", set.image_id, fm.meta.layer_id);
            write_fmap(dir.join(&rel), fm)?;
            layers.push(ManifestLayer {
                layer_id: fm.meta.layer_id.clone(),
                path: rel,
            });
        }
        manifest.push(ManifestEntry {
            image_id: set.image_id.clone(),
            layers,
        });
    }
    crate::fmap::write_manifest(dir.join("manifest.json"), &manifest)?;
    let truth = TruthFile {
        graph: serde_json::from_str(&planted.to_json()).expect("graph json"),
        images: data.truth.clone(),
    };
    write_text(
        &dir.join("truth.json"),
        &(serde_json::to_string_pretty(&truth).expect("truth serializes") + "\n"),
    )?;
    data.landmarks().write(dir.join("landmarks.json"))?;
    write_text(&dir.join("layers.json"), &spec.layers_file(config).to_json())?;
    write_text(
        &dir.join("synth.json"),
        &(serde_json::to_string_pretty(spec).expect("spec serializes") + "\n"),
    )?;
    Ok(())
}

/// Reads the planted graph and per-image truth back from `truth.json`.
pub fn read_truth(path: impl AsRef<Path>) -> Result<(ExplanatoryGraph, Vec<ImageTruth>)> {
    let path = path.as_ref();
    let file: TruthFile = crate::error::read_json(path)?;
    let graph = ExplanatoryGraph::from_json(&file.graph.to_string())?;
    Ok((graph, file.images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_images: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn planted_graph_is_deterministic_and_separated() {
        let spec = small();
        let a = gen_planted_graph(&spec).unwrap();
        assert_eq!(a, gen_planted_graph(&spec).unwrap());
        for layer in &a.layers {
            for d in 0..layer.spec.filters {
                let f = layer.filter_nodes(d);
                for x in 0..f.len() {
                    for y in x + 1..f.len() {
                        assert!(f[x].mu.dist(f[y].mu) >= spec.min_separation);
                    }
                }
            }
        }
    }

    #[test]
    fn impossible_separation_reported() {
        let spec = SynthSpec {
            min_separation: 2.0,
            ..small()
        };
        assert!(matches!(
            gen_planted_graph(&spec),
            Err(Error::SeparationUnsatisfiable { .. })
        ));
        // one pattern per filter never binds
        let mut one = spec.clone();
        for l in &mut one.layers {
            l.patterns_per_filter = 1;
        }
        gen_planted_graph(&one).unwrap();
    }

    #[test]
    fn noiseless_unjittered_bumps_sit_on_planted_mu() {
        let spec = SynthSpec {
            jitter: 0.0,
            noise_peaks: 0.0,
            sigma2_range: [1e-4, 1e-4],
            ..small()
        };
        let mut g = gen_planted_graph(&spec).unwrap();
        // σ* at the floor still draws per-pattern noise; compare truth to μ*+noise
        let data = sample_images(&g, &spec).unwrap();
        for t in &data.truth {
            assert_eq!(t.jitter, Point::ORIGIN);
            for pp in &t.positions {
                assert!(pp.p.dist(g.node(pp.node_id).unwrap().mu) < 0.06);
            }
        }
        // with a vanishing σ*, positions are μ* exactly
        for n in g.layers.iter_mut().flat_map(|l| &mut l.nodes) {
            n.sigma2 = 1e-300;
        }
        let data = sample_images(&g, &spec).unwrap();
        for pp in data.truth.iter().flat_map(|t| &t.positions) {
            assert_eq!(pp.p, g.node(pp.node_id).unwrap().mu);
        }
    }

    #[test]
    fn truth_reprojects_within_one_cell() {
        let spec = small();
        let g = gen_planted_graph(&spec).unwrap();
        let data = sample_images(&g, &spec).unwrap();
        for (set, t) in data.dataset.images.iter().zip(&data.truth) {
            for pp in &t.positions {
                let fm = &set.maps[pp.node_id.layer];
                let m = &fm.meta;
                let j = ((pp.p.u * m.image_width_px - m.offset_px[0]) / m.stride_px).round();
                let i = ((pp.p.v * m.image_height_px - m.offset_px[1]) / m.stride_px).round();
                let (i, j) = (i.clamp(0.0, (m.height - 1) as f64) as usize, j.clamp(0.0, (m.width - 1) as f64) as usize);
                let cell = project_position(i, j, m).unwrap();
                assert!((cell.u - pp.p.u).abs() <= m.step_normalized() && (cell.v - pp.p.v).abs() <= m.step_normalized());
                assert!(fm.get(pp.node_id.filter, i, j) > 0.0);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = small();
        let g = gen_planted_graph(&spec).unwrap();
        let a = sample_images(&g, &spec).unwrap();
        let b = sample_images(&g, &spec).unwrap();
        assert_eq!(a.truth, b.truth);
        for (x, y) in a.dataset.images.iter().zip(&b.dataset.images) {
            for (fx, fy) in x.maps.iter().zip(&y.maps) {
                assert_eq!(fx.to_bytes(), fy.to_bytes());
            }
        }
    }

    #[test]
    fn recovery_identity_and_permutation() {
        let spec = small();
        let g = gen_planted_graph(&spec).unwrap();
        let r = recovery_error(&g, &g, RECOVERY_THRESHOLD).unwrap();
        assert_eq!((r.mean_error, r.rate), (0.0, 1.0));
        let mut shuffled = g.clone();
        for layer in &mut shuffled.layers {
            let n = layer.spec.patterns_per_filter;
            for d in 0..layer.spec.filters {
                let mus: Vec<Point> = layer.filter_nodes(d).iter().map(|x| x.mu).collect();
                for k in 0..n {
                    layer.nodes[d * n + k].mu = mus[(k + 1) % n];
                }
            }
        }
        let r = recovery_error(&g, &shuffled, RECOVERY_THRESHOLD).unwrap();
        assert_eq!((r.mean_error, r.rate), (0.0, 1.0));
    }

    #[test]
    fn greedy_matches_exhaustive_on_random_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let pts = |rng: &mut ChaCha8Rng| -> Vec<Point> {
                (0..n).map(|_| Point::new(rng.random(), rng.random())).collect()
            };
            let a = pts(&mut rng);
            // learned = planted + small perturbation, the regime recovery runs in
            let b: Vec<Point> = a
                .iter()
                .map(|p| *p + Point::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)))
                .collect();
            let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x.dist(*y)).collect()).collect();
            let total = |m: &[usize]| m.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>();
            let e = match_exhaustive(&cost);
            let g = match_greedy(&cost);
            assert!((total(&e) - total(&g)).abs() < 1e-12 || a.iter().enumerate().any(|(x, p)| a[x + 1..].iter().any(|q| p.dist(*q) < 0.05)));
        }
    }
}
