//! Top-down EM learning of the explanatory graph.

pub mod compat;
pub mod config;
pub mod em;
pub mod neighbors;

pub use compat::{compatibility_closed, compatibility_product, log_compatibility_product, Frame, Observation, UpperContext};
pub use config::{LayersFile, LearnConfig, MStepMode};
pub use em::{e_step, estimate_sigma, m_step_mu, Entry, LayerData, Responsibilities, SuffStats};
pub use neighbors::{rank_candidates, select_neighbors, Selection, SelectionData};

use crate::error::{write_text, Error, Result};
use crate::fmap::Dataset;
use crate::geom::Point;
use crate::graph::{Edge, ExplanatoryGraph, GraphLayer, Hyperparams, LayerSpec, NodeId, PatternNode};
use crate::inference::{infer_layer, NodeAssignment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// Result of learning one layer.
#[derive(Clone, Debug)]
pub struct LayerOutcome {
    pub layer: GraphLayer,
    /// Inferred positions `R_L`, `[image][node]`.
    pub assignments: Vec<Vec<NodeAssignment>>,
    /// Data log-likelihood before the first iteration and after each one.
    pub loglik: Vec<f64>,
    /// Nodes that received no responsibility mass in the last iteration.
    pub starved: Vec<NodeId>,
}

/// Random initial nodes: μ uniform in `[0.1, 0.9]²`, σ² = `sigma2_init`,
/// linked to the dummy node until neighbors are chosen.
pub fn init_nodes(layer_index: usize, spec: &LayerSpec, config: &LearnConfig) -> Vec<PatternNode> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(layer_index as u64);
    let mut nodes = Vec::with_capacity(spec.filters * spec.patterns_per_filter);
    for d in 0..spec.filters {
        for k in 0..spec.patterns_per_filter {
            let mu = Point::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            nodes.push(PatternNode {
                id: NodeId::new(layer_index, d, k),
                mu,
                sigma2: config.sigma2_init,
                edges: vec![Edge::Dummy],
            });
        }
    }
    nodes
}

pub fn learn_layer(
    layer_index: usize,
    spec: &LayerSpec,
    data: &LayerData,
    ctx: &UpperContext<'_>,
    config: &LearnConfig,
) -> Result<LayerOutcome> {
    let nodes = init_nodes(layer_index, spec, config);
    learn_layer_from(layer_index, spec, nodes, data, ctx, config)
}

struct ImagePass {
    frames: Vec<Frame>,
    stats: Vec<SuffStats>,
    loglik: f64,
}

fn image_pass(
    image: usize,
    nodes: &[PatternNode],
    n: usize,
    data: &LayerData,
    ctx: &UpperContext<'_>,
    tau: f64,
    with_stats: bool,
) -> Result<ImagePass> {
    let frames = nodes
        .iter()
        .map(|node| Frame::build(node, ctx, image))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = Vec::with_capacity(if with_stats { nodes.len() } else { 0 });
    let mut loglik = 0.0;
    for (d, entries) in data.entries[image].iter().enumerate() {
        let fr = &frames[d * n..(d + 1) * n];
        if with_stats {
            let (resp, ll) = e_step(entries, fr, tau);
            loglik += ll;
            stats.extend((0..n).map(|k| SuffStats::accumulate(entries, &resp, k)));
        } else {
            loglik += em::filter_loglik(entries, fr, tau);
        }
    }
    Ok(ImagePass { frames, stats, loglik })
}

/// EM from the given initial nodes. Each iteration runs the E-step over all
/// images, then updates nodes one at a time: μ_V, σ²_V and (below the top)
/// the neighbor set E_V.
pub fn learn_layer_from(
    layer_index: usize,
    spec: &LayerSpec,
    mut nodes: Vec<PatternNode>,
    data: &LayerData,
    ctx: &UpperContext<'_>,
    config: &LearnConfig,
) -> Result<LayerOutcome> {
    config.validate()?;
    let n = spec.patterns_per_filter;
    if data.meta.depth != spec.filters || nodes.len() != spec.filters * n {
        return Err(Error::ShapeMismatch(format!(
            "layer {} expects {} filters x {n} patterns, data has {} filters and {} nodes were given",
            spec.layer_id,
            spec.filters,
            data.meta.depth,
            nodes.len()
        )));
    }
    if let Some((k, node)) = nodes
        .iter()
        .enumerate()
        .find(|(k, node)| node.id != NodeId::new(layer_index, k / n, k % n))
    {
        return Err(Error::ShapeMismatch(format!(
            "initial node {} at position {k} of layer {layer_index}",
            node.id
        )));
    }
    let n_images = data.n_images();
    if n_images == 0 {
        return Err(Error::EmptyDataset);
    }
    if !ctx.is_dummy() && ctx.n_images() != n_images {
        return Err(Error::ShapeMismatch(format!(
            "{} images of upper inferences for {n_images} images",
            ctx.n_images()
        )));
    }
    let is_top = ctx.is_dummy();
    let prior = 1.0 / (n + 1) as f64;
    let mut loglik = Vec::with_capacity(config.t + 1);
    let mut starved = Vec::new();

    for t in 0..=config.t {
        let with_stats = t < config.t;
        let passes = (0..n_images)
            .into_par_iter()
            .map(|i| image_pass(i, &nodes, n, data, ctx, config.tau, with_stats))
            .collect::<Result<Vec<_>>>()?;
        loglik.push(passes.iter().map(|p| p.loglik).sum());
        log::debug!("layer {} iter {t} loglik {}", spec.layer_id, loglik[t]);
        if !with_stats {
            break;
        }
        // regroup by node so each update sees all images
        let mut frames: Vec<Vec<Frame>> = vec![Vec::with_capacity(n_images); nodes.len()];
        let mut stats: Vec<Vec<SuffStats>> = vec![Vec::with_capacity(n_images); nodes.len()];
        for pass in passes {
            for (idx, (f, s)) in pass.frames.into_iter().zip(pass.stats).enumerate() {
                frames[idx].push(f);
                stats[idx].push(s);
            }
        }
        starved.clear();
        for idx in 0..nodes.len() {
            let d = idx / n;
            let up = m_step_mu(nodes[idx].mu, &frames[idx], &stats[idx], config.m_step_mode, config.eta);
            if up.zero_weight {
                starved.push(nodes[idx].id);
            }
            nodes[idx].mu = up.mu;
            for f in frames[idx].iter_mut() {
                *f = f.with_mu(up.mu);
            }
            if config.update_sigma {
                if let Some(s2) = estimate_sigma(nodes[idx].mu, &frames[idx], &stats[idx]) {
                    nodes[idx].sigma2 = s2;
                    if nodes[idx].edges.contains(&Edge::Dummy) {
                        frames[idx] = rebuild(&nodes[idx], ctx, n_images)?;
                    }
                }
            }
            let unlinked = nodes[idx].edges.contains(&Edge::Dummy);
            if !is_top && (config.update_neighbors || unlinked) {
                let others = other_mass(data, &frames, d, n, idx, prior, config.tau);
                let sel_data = SelectionData {
                    entries: data.entries.iter().map(|img| img[d].as_slice()).collect(),
                    others,
                    prior,
                    stats: &stats[idx],
                };
                let mass: Vec<f64> = stats[idx].iter().map(|s| s.weight).collect();
                let candidates = rank_candidates(&mass, ctx, config.candidate_pool);
                let sel = select_neighbors(&nodes[idx], &candidates, config.m, &sel_data, ctx)?;
                // keep the current set unless the greedy one does at least as well
                let keep = !unlinked && neighbors::selection_loglik(&frames[idx], &sel_data) > sel.loglik;
                if !keep {
                    nodes[idx].edges = sel.edges;
                    nodes[idx].mu = sel.mu;
                    frames[idx] = rebuild(&nodes[idx], ctx, n_images)?;
                }
            }
        }
        if !starved.is_empty() {
            log::warn!(
                "layer {} iter {}: {} nodes received no responsibility mass",
                spec.layer_id,
                t + 1,
                starved.len()
            );
        }
    }

    let layer = GraphLayer {
        spec: spec.clone(),
        nodes,
    };
    let assignments = (0..n_images)
        .into_par_iter()
        .map(|i| infer_layer(&layer, &data.entries[i], data.meta.width, ctx, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerOutcome {
        layer,
        assignments,
        loglik,
        starved,
    })
}

fn rebuild(node: &PatternNode, ctx: &UpperContext<'_>, n_images: usize) -> Result<Vec<Frame>> {
    (0..n_images)
        .into_par_iter()
        .map(|i| Frame::build(node, ctx, i))
        .collect()
}

/// Per image and entry of filter `d`: `P·(τ + Σ P(p_x|V''))` over the
/// filter's nodes other than `skip`.
fn other_mass(
    data: &LayerData,
    frames: &[Vec<Frame>],
    d: usize,
    n: usize,
    skip: usize,
    prior: f64,
    tau: f64,
) -> Vec<Vec<f64>> {
    (0..data.n_images())
        .into_par_iter()
        .map(|i| {
            data.entries[i][d]
                .iter()
                .map(|e| {
                    let rest: f64 = (d * n..(d + 1) * n)
                        .filter(|&idx| idx != skip)
                        .map(|idx| frames[idx][i].log_density(e.p).exp())
                        .sum();
                    prior * (tau + rest)
                })
                .collect()
        })
        .collect()
}

/// One row of the learning log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub layer: String,
    pub loglik: f64,
}

#[derive(Clone, Debug)]
pub struct LearnedGraph {
    pub graph: ExplanatoryGraph,
    /// Top layer first, in learning order.
    pub log: Vec<LogRow>,
    /// Final inferences per layer, `[layer][image][node]`, layers bottom to top.
    pub assignments: Vec<Vec<Vec<NodeAssignment>>>,
}

/// Learns all layers top-down. `specs` are ordered bottom to top.
pub fn learn_graph(dataset: &Dataset, specs: &[LayerSpec], config: &LearnConfig) -> Result<LearnedGraph> {
    config.validate()?;
    if dataset.images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no layers to learn".into()));
    }
    if config.t == 0 && specs.len() > 1 {
        return Err(Error::InvalidConfig("T = 0 leaves lower-layer nodes without neighbors".into()));
    }
    for set in &dataset.images {
        for spec in specs {
            if set.layer(&spec.layer_id).is_none() {
                return Err(Error::LayerMissingInImage {
                    image_id: set.image_id.clone(),
                    layer_id: spec.layer_id.clone(),
                });
            }
        }
    }
    let mut learned: Vec<LayerOutcome> = Vec::with_capacity(specs.len());
    let mut log = Vec::new();
    for li in (0..specs.len()).rev() {
        let spec = &specs[li];
        let data = LayerData::from_dataset(dataset, &spec.layer_id, config.beta)?;
        let outcome = match learned.last() {
            None => learn_layer(li, spec, &data, &UpperContext::dummy(data.n_images()), config)?,
            Some(upper) => {
                let obs = upper
                    .assignments
                    .iter()
                    .map(|img| img.iter().map(NodeAssignment::observation).collect())
                    .collect();
                let ctx = UpperContext::from_layer(&upper.layer, obs)?;
                learn_layer(li, spec, &data, &ctx, config)?
            }
        };
        log::info!(
            "learned layer {} ({} nodes), final loglik {}",
            spec.layer_id,
            outcome.layer.nodes.len(),
            outcome.loglik.last().copied().unwrap_or(f64::NAN)
        );
        log.extend(outcome.loglik.iter().enumerate().map(|(iter, &ll)| LogRow {
            iter,
            layer: spec.layer_id.clone(),
            loglik: ll,
        }));
        learned.push(outcome);
    }
    learned.reverse();
    let (layers, assignments) = learned.into_iter().map(|o| (o.layer, o.assignments)).unzip();
    let graph = ExplanatoryGraph {
        hyperparams: Hyperparams::new(config.tau, config.m, config.t, config.beta),
        layers,
    };
    graph.validate()?;
    Ok(LearnedGraph { graph, log, assignments })
}

pub fn learn_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iter,layer,loglik\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.iter, r.layer, r.loglik));
    }
    out
}

pub fn write_learn_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    write_text(path.as_ref(), &learn_log_csv(rows))
}
