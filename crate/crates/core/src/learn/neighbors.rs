//! Greedy choice of a node's upper-layer neighbor set E_V.

use super::compat::{Frame, Resolved, UpperContext};
use super::em::{closed_form_mu, Entry, SuffStats};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::graph::{Edge, NodeId, PatternNode};
use rayon::prelude::*;
use std::cmp::Ordering;

/// Ranks upper nodes by Pearson correlation between the node's per-image
/// responsibility mass and each upper node's per-image inference score,
/// keeping the best `pool`. Ties and undefined correlations fall back to
/// node-id order.
pub fn rank_candidates(node_mass: &[f64], ctx: &UpperContext<'_>, pool: usize) -> Vec<NodeId> {
    let Some(layer) = ctx.layer() else {
        return Vec::new();
    };
    let ids: Vec<NodeId> = layer.nodes.iter().map(|n| n.id).collect();
    if ids.len() <= pool {
        return ids;
    }
    let mut ranked: Vec<(f64, NodeId)> = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let scores: Vec<f64> = (0..ctx.n_images())
                .map(|i| {
                    let o = ctx.observations(i)[k];
                    if o.detected {
                        o.score
                    } else {
                        0.0
                    }
                })
                .collect();
            (pearson(node_mass, &scores), id)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    ranked.truncate(pool);
    ranked.into_iter().map(|(_, id)| id).collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    }
}

/// The data a node's neighbor search needs, restricted to its filter.
pub struct SelectionData<'a> {
    /// Filter-d entries, per image.
    pub entries: Vec<&'a [Entry]>,
    /// Per image, per entry: `P·(τ + Σ_{V''≠V} P(p_x|V''))`, the mixture
    /// mass from every other component.
    pub others: Vec<Vec<f64>>,
    /// The component prior `1/(N+1)`.
    pub prior: f64,
    /// The node's responsibility statistics, per image.
    pub stats: &'a [SuffStats],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Sorted by node id.
    pub edges: Vec<Edge>,
    /// μ_V refit in closed form for the chosen set.
    pub mu: Point,
    pub loglik: f64,
}

/// Builds E_V one neighbor at a time, each time adding the candidate whose
/// inclusion (with μ_V refit) maximizes the filter's data log-likelihood.
pub fn select_neighbors(
    node: &PatternNode,
    candidates: &[NodeId],
    m: usize,
    data: &SelectionData<'_>,
    ctx: &UpperContext<'_>,
) -> Result<Selection> {
    if candidates.len() < m {
        return Err(Error::InsufficientCandidates {
            node: node.id,
            need: m,
            have: candidates.len(),
        });
    }
    let mut order: Vec<NodeId> = candidates.to_vec();
    order.sort();
    order.dedup();
    if order.len() < m {
        return Err(Error::InsufficientCandidates {
            node: node.id,
            need: m,
            have: order.len(),
        });
    }
    let n_images = data.entries.len();
    let resolved: Vec<Vec<Resolved>> = order
        .iter()
        .map(|&c| {
            (0..n_images)
                .map(|i| ctx.resolve(i, Edge::Node(c), node.sigma2))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut best_fit = (node.mu, f64::NEG_INFINITY);
    while chosen.len() < m {
        let mut best: Option<(usize, Point, f64)> = None;
        for ci in 0..order.len() {
            if chosen.contains(&ci) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(ci);
            let (mu, ll) = evaluate(node.mu, &trial, &resolved, data);
            if best.is_none_or(|b| ll > b.2) {
                best = Some((ci, mu, ll));
            }
        }
        let (ci, mu, ll) = best.expect("candidates remain");
        chosen.push(ci);
        best_fit = (mu, ll);
    }
    let mut edges: Vec<Edge> = chosen.iter().map(|&ci| Edge::Node(order[ci])).collect();
    edges.sort();
    Ok(Selection {
        edges,
        mu: best_fit.0,
        loglik: best_fit.1,
    })
}

/// Refits μ_V for the neighbor subset and returns it with the filter's
/// data log-likelihood.
fn evaluate(mu0: Point, subset: &[usize], resolved: &[Vec<Resolved>], data: &SelectionData<'_>) -> (Point, f64) {
    let n_images = data.entries.len();
    let frames: Vec<Frame> = (0..n_images)
        .map(|i| {
            let list: Vec<Resolved> = subset.iter().map(|&c| resolved[c][i]).collect();
            Frame::from_resolved(mu0, &list)
        })
        .collect();
    let mu = closed_form_mu(&frames, data.stats).map_or(mu0, Point::clamp_unit);
    let moved: Vec<Frame> = frames.iter().map(|f| f.with_mu(mu)).collect();
    (mu, selection_loglik(&moved, data))
}

/// The filter's data log-likelihood with the node's per-image frames
/// `frames` and every other component held fixed.
pub fn selection_loglik(frames: &[Frame], data: &SelectionData<'_>) -> f64 {
    let log_prior = data.prior.ln();
    let per_image: Vec<f64> = (0..data.entries.len())
        .into_par_iter()
        .map(|i| {
            data.entries[i]
                .iter()
                .zip(&data.others[i])
                .map(|(e, &rest)| e.weight * (rest + (log_prior + frames[i].log_density(e.p)).exp()).ln())
                .sum::<f64>()
        })
        .collect();
    per_image.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::compat::Observation;
    use crate::graph::{GraphLayer, LayerSpec};

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), 0.0);
    }

    #[test]
    fn full_candidate_set_is_forced() {
        let layer = GraphLayer {
            spec: LayerSpec {
                layer_id: "up".into(),
                filters: 3,
                patterns_per_filter: 1,
            },
            nodes: (0..3)
                .map(|d| PatternNode {
                    id: NodeId::new(1, d, 0),
                    mu: Point::new(0.2 + 0.3 * d as f64, 0.5),
                    sigma2: 0.004,
                    edges: vec![Edge::Dummy],
                })
                .collect(),
        };
        let obs: Vec<Vec<Observation>> = (0..4)
            .map(|i| {
                layer
                    .nodes
                    .iter()
                    .map(|n| Observation {
                        p: n.mu + Point::new(0.01 * i as f64, 0.0),
                        score: 1.0,
                        detected: true,
                    })
                    .collect()
            })
            .collect();
        let ctx = UpperContext::from_layer(&layer, obs).unwrap();
        let entries: Vec<Vec<Entry>> = (0..4)
            .map(|i| {
                vec![Entry {
                    index: 0,
                    p: Point::new(0.5 + 0.01 * i as f64, 0.3),
                    weight: 1.0,
                }]
            })
            .collect();
        let stats: Vec<SuffStats> = entries
            .iter()
            .map(|e| SuffStats {
                weight: 1.0,
                sum_p: e[0].p,
                sum_sq: e[0].p.norm_sq(),
            })
            .collect();
        let data = SelectionData {
            entries: entries.iter().map(|e| e.as_slice()).collect(),
            others: vec![vec![0.05]; 4],
            prior: 0.5,
            stats: &stats,
        };
        let node = PatternNode {
            id: NodeId::new(0, 0, 0),
            mu: Point::new(0.5, 0.3),
            sigma2: 0.0025,
            edges: vec![Edge::Dummy],
        };
        let cands = [NodeId::new(1, 2, 0), NodeId::new(1, 0, 0), NodeId::new(1, 1, 0)];
        let sel = select_neighbors(&node, &cands, 3, &data, &ctx).unwrap();
        let mut expect: Vec<Edge> = cands.iter().map(|&c| Edge::Node(c)).collect();
        expect.sort();
        assert_eq!(sel.edges, expect);
        assert!(matches!(
            select_neighbors(&node, &cands[..2], 3, &data, &ctx),
            Err(Error::InsufficientCandidates { .. })
        ));
    }
}
