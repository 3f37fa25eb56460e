//! Spatial compatibility between a pattern and a position given the inferred
//! positions of its upper-layer neighbors.
//!
//! Each neighbor `V'` predicts the pattern at `μ_V − μ_{V'} + p_{V'}` with
//! variance `σ²_{V'}`; the compatibility is the geometric mean of those
//! Gaussians. Because the product of isotropic Gaussians is again Gaussian,
//! every compatibility reduces to a [`Frame`]: a shifted, rescaled Gaussian
//! around `μ_V + Δ` plus an image-specific constant.

use crate::error::{Error, Result};
use crate::geom::{log_gauss2, Point};
use crate::graph::{Edge, GraphLayer, NodeId, PatternNode};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// An upper-layer node's inference in one image.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub p: Point,
    pub score: f64,
    pub detected: bool,
}

/// Inferred positions R_{L+1} of the layer above, for every image.
/// The dummy context stands above the top layer.
#[derive(Clone, Debug)]
pub struct UpperContext<'a> {
    layer: Option<&'a GraphLayer>,
    observations: Vec<Vec<Observation>>,
    n_images: usize,
}

impl<'a> UpperContext<'a> {
    pub fn dummy(n_images: usize) -> Self {
        UpperContext {
            layer: None,
            observations: Vec::new(),
            n_images,
        }
    }

    /// `observations[image][k]` belongs to `layer.nodes[k]`.
    pub fn from_layer(layer: &'a GraphLayer, observations: Vec<Vec<Observation>>) -> Result<Self> {
        if let Some(bad) = observations.iter().position(|o| o.len() != layer.nodes.len()) {
            return Err(Error::ShapeMismatch(format!(
                "image {bad}: {} observations for {} upper nodes",
                observations[bad].len(),
                layer.nodes.len()
            )));
        }
        Ok(UpperContext {
            layer: Some(layer),
            n_images: observations.len(),
            observations,
        })
    }

    pub fn is_dummy(&self) -> bool {
        self.layer.is_none()
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn layer(&self) -> Option<&'a GraphLayer> {
        self.layer
    }

    pub fn observations(&self, image: usize) -> &[Observation] {
        self.observations.get(image).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn observation(&self, image: usize, id: NodeId) -> Option<Observation> {
        let k = self.layer?.node_index(id)?;
        self.observations.get(image)?.get(k).copied()
    }

    /// Resolves one edge of a node whose own variance is `own_sigma2`.
    /// The dummy parent sits at the origin with the node's own variance.
    pub fn resolve(&self, image: usize, edge: Edge, own_sigma2: f64) -> Result<Resolved> {
        match edge {
            Edge::Dummy => Ok(Resolved {
                mu: Point::ORIGIN,
                p: Point::ORIGIN,
                sigma2: own_sigma2,
                present: true,
            }),
            Edge::Node(id) => {
                let missing = || Error::MissingNeighborInference { image, node: id };
                let node = self.layer.and_then(|l| l.node(id)).ok_or_else(missing)?;
                let obs = self.observation(image, id).ok_or_else(missing)?;
                Ok(Resolved {
                    mu: node.mu,
                    p: if obs.detected { obs.p } else { node.mu },
                    sigma2: node.sigma2,
                    present: obs.detected,
                })
            }
        }
    }
}

/// A neighbor's prior position, inferred position and variance.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Resolved {
    pub mu: Point,
    pub p: Point,
    pub sigma2: f64,
    pub present: bool,
}

/// Neighbors that enter the product: the detected ones, or all of them
/// (at their prior positions) when none was detected.
fn active(neighbors: &[Resolved]) -> impl Iterator<Item = &Resolved> {
    let any = neighbors.iter().any(|n| n.present);
    neighbors.iter().filter(move |n| n.present || !any)
}

/// Closed form of a node's compatibility in one image:
/// `log P(p) = log_const − ‖p − center‖² / (2·var)`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Frame {
    /// μ_V + Δ_{I,V}
    pub center: Point,
    /// Δ_{I,V}
    pub delta: Point,
    /// σ̃²_V
    pub var: f64,
    pub log_const: f64,
}

impl Frame {
    pub fn from_resolved(mu_v: Point, neighbors: &[Resolved]) -> Frame {
        let mut n = 0.0;
        let mut w_sum = 0.0;
        let mut wd = Point::ORIGIN;
        let mut log_norm = 0.0;
        for r in active(neighbors) {
            let w = 1.0 / r.sigma2;
            n += 1.0;
            w_sum += w;
            wd += (r.p - r.mu) * w;
            log_norm += (2.0 * PI * r.sigma2).ln();
        }
        let delta = wd * (1.0 / w_sum);
        let spread: f64 = active(neighbors)
            .map(|r| (r.p - r.mu).dist_sq(delta) / r.sigma2)
            .sum();
        Frame {
            center: mu_v + delta,
            delta,
            var: n / w_sum,
            log_const: -log_norm / n - spread / (2.0 * n),
        }
    }

    pub fn build(node: &PatternNode, ctx: &UpperContext<'_>, image: usize) -> Result<Frame> {
        let resolved = node
            .edges
            .iter()
            .map(|&e| ctx.resolve(image, e, node.sigma2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Frame::from_resolved(node.mu, &resolved))
    }

    /// Same frame with the prior position moved to `mu_v`.
    pub fn with_mu(&self, mu_v: Point) -> Frame {
        Frame {
            center: mu_v + self.delta,
            ..*self
        }
    }

    #[inline]
    pub fn log_density(&self, p: Point) -> f64 {
        self.log_const - p.dist_sq(self.center) / (2.0 * self.var)
    }

    /// Log of the normalized Gaussian `N(p | center, var)`.
    pub fn log_normalized(&self, p: Point) -> f64 {
        log_gauss2(p, self.center, self.var)
    }
}

/// `log ∏_{V'} N(p_x | μ_V − μ_{V'} + p_{V'}, σ²_{V'})^{1/M}`, evaluated term by term.
pub fn log_compatibility_product(p_x: Point, node: &PatternNode, ctx: &UpperContext<'_>, image: usize) -> Result<f64> {
    let resolved = node
        .edges
        .iter()
        .map(|&e| ctx.resolve(image, e, node.sigma2))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_product_of(p_x, node.mu, &resolved))
}

pub(crate) fn log_product_of(p_x: Point, mu_v: Point, neighbors: &[Resolved]) -> f64 {
    let terms: Vec<f64> = active(neighbors)
        .map(|r| log_gauss2(p_x, mu_v - r.mu + r.p, r.sigma2))
        .collect();
    let lambda = 1.0 / terms.len() as f64;
    terms.iter().map(|t| lambda * t).sum()
}

/// Compatibility `P(p_x | V, R_{L+1})` with the normalizing constant γ fixed to 1.
pub fn compatibility_product(p_x: Point, node: &PatternNode, ctx: &UpperContext<'_>, image: usize) -> Result<f64> {
    log_compatibility_product(p_x, node, ctx, image).map(f64::exp)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ClosedForm {
    /// `N(p_x | μ_V + Δ, σ̃²)`, an exactly normalized Gaussian.
    pub density: f64,
    pub delta: Point,
    pub sigma2_tilde: f64,
}

pub fn compatibility_closed(p_x: Point, node: &PatternNode, ctx: &UpperContext<'_>, image: usize) -> Result<ClosedForm> {
    let frame = Frame::build(node, ctx, image)?;
    Ok(ClosedForm {
        density: frame.log_normalized(p_x).exp(),
        delta: frame.delta,
        sigma2_tilde: frame.var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerSpec;

    fn upper(mus: &[(f64, f64, f64)]) -> GraphLayer {
        GraphLayer {
            spec: LayerSpec {
                layer_id: "up".into(),
                filters: mus.len(),
                patterns_per_filter: 1,
            },
            nodes: mus
                .iter()
                .enumerate()
                .map(|(d, &(u, v, s2))| PatternNode {
                    id: NodeId::new(1, d, 0),
                    mu: Point::new(u, v),
                    sigma2: s2,
                    edges: vec![Edge::Dummy],
                })
                .collect(),
        }
    }

    fn obs(ps: &[(f64, f64)]) -> Vec<Vec<Observation>> {
        vec![ps
            .iter()
            .map(|&(u, v)| Observation {
                p: Point::new(u, v),
                score: 1.0,
                detected: true,
            })
            .collect()]
    }

    fn node(mu: (f64, f64), sigma2: f64, edges: Vec<Edge>) -> PatternNode {
        PatternNode {
            id: NodeId::new(0, 0, 0),
            mu: Point::new(mu.0, mu.1),
            sigma2,
            edges,
        }
    }

    #[test]
    fn top_layer_peak() {
        let ctx = UpperContext::dummy(1);
        let v = node((0.4, 0.6), 0.0025, vec![Edge::Dummy]);
        let dens = compatibility_product(v.mu, &v, &ctx, 0).unwrap();
        assert!((dens - 1.0 / (2.0 * PI * 0.0025)).abs() < 1e-9);
    }

    #[test]
    fn single_neighbor_shifts_prediction() {
        let layer = upper(&[(0.2, 0.2, 0.01)]);
        let ctx = UpperContext::from_layer(&layer, obs(&[(0.3, 0.3)])).unwrap();
        let v = node((0.5, 0.5), 0.0025, vec![Edge::Node(NodeId::new(1, 0, 0))]);
        let peak = compatibility_product(Point::new(0.6, 0.6), &v, &ctx, 0).unwrap();
        for p in [Point::new(0.59, 0.6), Point::new(0.6, 0.61), Point::new(0.5, 0.5)] {
            assert!(compatibility_product(p, &v, &ctx, 0).unwrap() < peak);
        }
        let closed = compatibility_closed(Point::new(0.6, 0.6), &v, &ctx, 0).unwrap();
        assert!((closed.delta.u - 0.1).abs() < 1e-15 && (closed.delta.v - 0.1).abs() < 1e-15);
        assert_eq!(closed.sigma2_tilde, 0.01);
    }

    #[test]
    fn equal_variance_delta_is_average() {
        let layer = upper(&[(0.3, 0.3, 0.004), (0.7, 0.3, 0.004)]);
        let ctx = UpperContext::from_layer(&layer, obs(&[(0.32, 0.3), (0.7, 0.32)])).unwrap();
        let v = node(
            (0.5, 0.6),
            0.0025,
            vec![Edge::Node(NodeId::new(1, 0, 0)), Edge::Node(NodeId::new(1, 1, 0))],
        );
        let c = compatibility_closed(Point::new(0.5, 0.5), &v, &ctx, 0).unwrap();
        assert!((c.delta.u - 0.01).abs() < 1e-12 && (c.delta.v - 0.01).abs() < 1e-12);
        assert!((c.sigma2_tilde - 0.004).abs() < 1e-15);
    }

    #[test]
    fn product_over_closed_is_constant() {
        let layer = upper(&[(0.3, 0.3, 0.004), (0.7, 0.3, 0.01)]);
        let ctx = UpperContext::from_layer(&layer, obs(&[(0.35, 0.28), (0.66, 0.33)])).unwrap();
        let v = node(
            (0.5, 0.6),
            0.0025,
            vec![Edge::Node(NodeId::new(1, 0, 0)), Edge::Node(NodeId::new(1, 1, 0))],
        );
        let frame = Frame::build(&v, &ctx, 0).unwrap();
        let mut ratios = Vec::new();
        for a in 0..10 {
            for b in 0..10 {
                let p = Point::new(a as f64 / 9.0, b as f64 / 9.0);
                let lp = log_compatibility_product(p, &v, &ctx, 0).unwrap();
                let lc = frame.log_normalized(p);
                ratios.push((lp - lc).exp());
                assert!((frame.log_density(p) - lp).abs() <= 1e-12 * lp.abs().max(1.0));
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let spread = ratios.iter().fold(0.0f64, |m, r| m.max((r - mean).abs())) / mean;
        assert!(spread < 1e-9, "spread {spread}");
    }

    #[test]
    fn undetected_neighbors_drop_out() {
        let layer = upper(&[(0.3, 0.3, 0.004), (0.7, 0.3, 0.004)]);
        let mut o = obs(&[(0.35, 0.3), (0.9, 0.9)]);
        o[0][1].detected = false;
        let ctx = UpperContext::from_layer(&layer, o).unwrap();
        let v = node(
            (0.5, 0.5),
            0.0025,
            vec![Edge::Node(NodeId::new(1, 0, 0)), Edge::Node(NodeId::new(1, 1, 0))],
        );
        let c = compatibility_closed(Point::new(0.5, 0.5), &v, &ctx, 0).unwrap();
        assert!((c.delta.u - 0.05).abs() < 1e-12 && c.delta.v.abs() < 1e-12);
    }

    #[test]
    fn missing_neighbor_is_an_error() {
        let ctx = UpperContext::dummy(1);
        let v = node((0.5, 0.5), 0.0025, vec![Edge::Node(NodeId::new(1, 0, 0))]);
        assert!(matches!(
            compatibility_product(v.mu, &v, &ctx, 0),
            Err(Error::MissingNeighborInference { .. })
        ));
        assert!(matches!(
            compatibility_closed(v.mu, &v, &ctx, 0),
            Err(Error::MissingNeighborInference { .. })
        ));
    }
}
