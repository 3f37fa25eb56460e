//! E-step and M-step of the per-filter mixture: the filter's patterns plus a
//! constant-density noise component, all with prior `1/(N+1)`, explaining
//! activation entities weighted by `F(x)`.

use super::compat::Frame;
use super::config::MStepMode;
use crate::error::{Error, Result};
use crate::fmap::{normalize_responses, Dataset, LayerMeta};
use crate::geom::{log_sum_exp, Point};
use crate::graph::SIGMA2_MIN;

/// A unit with positive entity count.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Entry {
    /// Row-major index within the filter's grid.
    pub index: u32,
    pub p: Point,
    /// F(x)
    pub weight: f64,
}

/// One layer's positive entities: `entries[image][filter]`.
#[derive(Clone, Debug)]
pub struct LayerData {
    pub meta: LayerMeta,
    pub entries: Vec<Vec<Vec<Entry>>>,
}

impl LayerData {
    pub fn from_dataset(dataset: &Dataset, layer_id: &str, beta: f64) -> Result<Self> {
        let first = dataset.images.first().ok_or(Error::EmptyDataset)?;
        let meta = first
            .layer(layer_id)
            .ok_or_else(|| Error::LayerMissingInImage {
                image_id: first.image_id.clone(),
                layer_id: layer_id.to_string(),
            })?
            .meta
            .clone();
        let mut entries = Vec::with_capacity(dataset.images.len());
        for set in &dataset.images {
            let fm = set.layer(layer_id).ok_or_else(|| Error::LayerMissingInImage {
                image_id: set.image_id.clone(),
                layer_id: layer_id.to_string(),
            })?;
            if (fm.meta.depth, fm.meta.height, fm.meta.width) != (meta.depth, meta.height, meta.width) {
                return Err(Error::ShapeMismatch(format!(
                    "image {} layer {layer_id} is {}x{}x{}, expected {}x{}x{}",
                    set.image_id, fm.meta.depth, fm.meta.height, fm.meta.width, meta.depth, meta.height, meta.width
                )));
            }
            entries.push(filter_entries(&normalize_responses(fm, beta), &fm.meta));
        }
        Ok(LayerData { meta, entries })
    }

    pub fn n_images(&self) -> usize {
        self.entries.len()
    }
}

/// Splits normalized units by filter, keeping those with `F(x) > 0`.
pub fn filter_entries(units: &[crate::fmap::Unit], meta: &LayerMeta) -> Vec<Vec<Entry>> {
    let per = meta.units_per_filter();
    units
        .chunks(per)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .filter(|(_, u)| u.entities > 0.0)
                .map(|(k, u)| Entry {
                    index: k as u32,
                    p: u.p,
                    weight: u.entities,
                })
                .collect()
        })
        .collect()
}

/// Row-major `(entry, component)` posteriors; the last column is V_none.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub components: usize,
    pub values: Vec<f64>,
}

impl Responsibilities {
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.components)
    }

    pub fn get(&self, entry: usize, component: usize) -> f64 {
        self.values[entry * self.components + component]
    }

    pub fn n_entries(&self) -> usize {
        self.values.len() / self.components
    }
}

/// Posterior over `Ω_{L,d} ∪ {V_none}` for each entry of one filter in one
/// image, plus that filter's contribution `Σ_x F(x)·log P(p_x)` to the data
/// log-likelihood.
pub fn e_step(entries: &[Entry], frames: &[Frame], tau: f64) -> (Responsibilities, f64) {
    let components = frames.len() + 1;
    let log_prior = -(components as f64).ln();
    let log_tau = tau.ln();
    let mut values = Vec::with_capacity(entries.len() * components);
    let mut terms = vec![0.0; components];
    let mut loglik = 0.0;
    for e in entries {
        for (t, f) in terms.iter_mut().zip(frames) {
            *t = log_prior + f.log_density(e.p);
        }
        terms[components - 1] = log_prior + log_tau;
        let lse = log_sum_exp(&terms);
        loglik += e.weight * lse;
        values.extend(terms.iter().map(|t| (t - lse).exp()));
    }
    (Responsibilities { components, values }, loglik)
}

/// `Σ_x F(x)·log Σ_V P(V)·P(p_x|V)` for one filter in one image.
pub fn filter_loglik(entries: &[Entry], frames: &[Frame], tau: f64) -> f64 {
    let components = frames.len() + 1;
    let log_prior = -(components as f64).ln();
    let mut terms = vec![log_prior + tau.ln(); components];
    entries
        .iter()
        .map(|e| {
            for (t, f) in terms.iter_mut().zip(frames) {
                *t = log_prior + f.log_density(e.p);
            }
            e.weight * log_sum_exp(&terms)
        })
        .sum()
}

/// Responsibility-weighted entity statistics of one node in one image.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct SuffStats {
    /// Σ r·F
    pub weight: f64,
    /// Σ r·F·p
    pub sum_p: Point,
    /// Σ r·F·‖p‖²
    pub sum_sq: f64,
}

impl SuffStats {
    pub fn accumulate(entries: &[Entry], resp: &Responsibilities, component: usize) -> SuffStats {
        let mut s = SuffStats::default();
        for (e, row) in entries.iter().zip(resp.rows()) {
            let w = row[component] * e.weight;
            s.weight += w;
            s.sum_p += e.p * w;
            s.sum_sq += w * e.p.norm_sq();
        }
        s
    }

    /// `Σ r·F·‖p − c‖²`
    pub fn scatter_about(&self, c: Point) -> f64 {
        let v = self.sum_sq - 2.0 * (c.u * self.sum_p.u + c.v * self.sum_p.v) + self.weight * c.norm_sq();
        v.max(0.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MuUpdate {
    pub mu: Point,
    /// The node carried no responsibility mass; `mu` is unchanged.
    pub zero_weight: bool,
}

/// Updates μ_V from per-image statistics and the node's per-image frames.
///
/// Closed form: weighted mean of `p_x − Δ_{I,V}`. Gradient: one step along
/// `Σ r·F·∂log P(p_x, V)/∂μ_V`. Results are projected onto `[0,1]²`.
pub fn m_step_mu(mu: Point, frames: &[Frame], stats: &[SuffStats], mode: MStepMode, eta: f64) -> MuUpdate {
    let total: f64 = stats.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return MuUpdate { mu, zero_weight: true };
    }
    let next = match mode {
        MStepMode::ClosedForm => closed_form_mu(frames, stats).unwrap_or(mu),
        MStepMode::Gradient => mu + mu_gradient(mu, frames, stats) * eta,
    };
    MuUpdate {
        mu: next.clamp_unit(),
        zero_weight: false,
    }
}

/// Unconstrained maximizer of `Σ_I Σ_x r·F·log N(p_x | μ + Δ_I, σ̃²_I)`:
/// the mean of `p_x − Δ_I` weighted by `r·F / σ̃²_I`. `None` without weight.
pub fn closed_form_mu(frames: &[Frame], stats: &[SuffStats]) -> Option<Point> {
    let mut acc = Point::ORIGIN;
    let mut norm = 0.0;
    for (s, f) in stats.iter().zip(frames) {
        acc += (s.sum_p - f.delta * s.weight) * (1.0 / f.var);
        norm += s.weight / f.var;
    }
    (norm > 0.0).then(|| acc * (1.0 / norm))
}

/// `∂/∂μ_V Σ_{I,x} r·F·log P(p_x, V | R_{L+1})`; the per-neighbor terms
/// `(p_x − μ_{V'→V}) / (M·σ²_{V'})` sum to `(p_x − μ_V − Δ) / σ̃²`.
pub fn mu_gradient(mu: Point, frames: &[Frame], stats: &[SuffStats]) -> Point {
    let mut g = Point::ORIGIN;
    for (s, f) in stats.iter().zip(frames) {
        let c = mu + f.delta;
        g += (s.sum_p - c * s.weight) * (1.0 / f.var);
    }
    g
}

/// Per-axis variance of `p_x − μ_V − Δ_{I,V}` under weights `r·F`, floored.
/// `None` when the node carries no weight.
pub fn estimate_sigma(mu: Point, frames: &[Frame], stats: &[SuffStats]) -> Option<f64> {
    let total: f64 = stats.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return None;
    }
    let scatter: f64 = stats
        .iter()
        .zip(frames)
        .map(|(s, f)| s.scatter_about(mu + f.delta))
        .sum();
    Some((scatter / total / 2.0).max(SIGMA2_MIN))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(center: Point, var: f64) -> Frame {
        Frame::from_resolved(
            center,
            &[super::super::compat::Resolved {
                mu: Point::ORIGIN,
                p: Point::ORIGIN,
                sigma2: var,
                present: true,
            }],
        )
    }

    fn entry(u: f64, v: f64, w: f64) -> Entry {
        Entry {
            index: 0,
            p: Point::new(u, v),
            weight: w,
        }
    }

    #[test]
    fn prior_is_uniform_over_components() {
        // Twenty nodes at the same spot as the entry plus the noise term:
        // the noise posterior is τ / (20·dens + τ) regardless of the prior,
        // while the prior itself is 1/21.
        let frames: Vec<Frame> = (0..20).map(|_| frame(Point::new(0.5, 0.5), 0.01)).collect();
        let (r, ll) = e_step(&[entry(0.5, 0.5, 1.0)], &frames, 0.1);
        let dens = 1.0 / (2.0 * std::f64::consts::PI * 0.01);
        let expect_none = 0.1 / (20.0 * dens + 0.1);
        assert!((r.get(0, 20) - expect_none).abs() < 1e-12);
        let expect_ll = ((20.0 * dens + 0.1) / 21.0).ln();
        assert!((ll - expect_ll).abs() < 1e-12);
        assert!((1.0f64 / 21.0 - 0.047619).abs() < 1e-6);
    }

    #[test]
    fn zero_density_goes_to_noise() {
        let frames = [frame(Point::new(0.0, 0.0), SIGMA2_MIN)];
        let (r, _) = e_step(&[entry(1.0, 1.0, 1.0)], &frames, 0.1);
        assert_eq!(r.get(0, 1), 1.0);
        assert_eq!(r.get(0, 0), 0.0);
    }

    #[test]
    fn symmetric_nodes_split_evenly() {
        let frames = [frame(Point::new(0.4, 0.5), 0.01), frame(Point::new(0.6, 0.5), 0.01)];
        let (r, _) = e_step(&[entry(0.5, 0.5, 1.0)], &frames, 0.1);
        let none = r.get(0, 2);
        assert!((r.get(0, 0) - (1.0 - none) / 2.0).abs() < 1e-15);
        assert!((r.get(0, 0) - r.get(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn closed_form_is_weighted_mean() {
        let frames = [frame(Point::new(0.9, 0.9), 0.0025)];
        let entries = [entry(0.2, 0.2, 1.0), entry(0.4, 0.4, 1.0)];
        let resp = Responsibilities {
            components: 2,
            values: vec![1.0, 0.0, 1.0, 0.0],
        };
        let stats = [SuffStats::accumulate(&entries, &resp, 0)];
        let up = m_step_mu(Point::new(0.9, 0.9), &frames, &stats, MStepMode::ClosedForm, 0.05);
        assert!(!up.zero_weight);
        assert!((up.mu.u - 0.3).abs() < 1e-15 && (up.mu.v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_keeps_mu() {
        let frames = [frame(Point::new(0.5, 0.5), 0.0025)];
        let stats = [SuffStats::default()];
        let up = m_step_mu(Point::new(0.5, 0.5), &frames, &stats, MStepMode::ClosedForm, 0.05);
        assert!(up.zero_weight);
        assert_eq!(up.mu, Point::new(0.5, 0.5));
        assert_eq!(estimate_sigma(up.mu, &frames, &stats), None);
    }

    #[test]
    fn sigma_examples() {
        let mu = Point::new(0.5, 0.5);
        let frames = [frame(mu, 0.0025)];
        let resp = Responsibilities {
            components: 2,
            values: vec![1.0, 0.0, 1.0, 0.0],
        };
        let at_mean = [entry(0.5, 0.5, 1.0), entry(0.5, 0.5, 2.0)];
        let stats = [SuffStats::accumulate(&at_mean, &resp, 0)];
        assert_eq!(estimate_sigma(mu, &frames, &stats), Some(SIGMA2_MIN));

        let ring = [entry(0.6, 0.5, 1.0), entry(0.5, 0.4, 1.0)];
        let stats = [SuffStats::accumulate(&ring, &resp, 0)];
        let s = estimate_sigma(mu, &frames, &stats).unwrap();
        assert!((s - 0.005).abs() < 1e-12, "{s}");
    }
}
