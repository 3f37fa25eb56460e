use crate::error::{read_json, Error, Result};
use crate::graph::{LayerSpec, SIGMA2_MIN};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepMode {
    /// Exact maximizer of the expected log-likelihood.
    #[default]
    ClosedForm,
    /// One ascent step `μ += η·∇`.
    Gradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnConfig {
    /// Density of the noise component V_none.
    pub tau: f64,
    /// Neighbors per non-top node.
    pub m: usize,
    /// EM iterations per layer.
    pub t: usize,
    /// Entity scale: F(x) = β·max(f_x, 0).
    pub beta: f64,
    /// Step size of the gradient M-step.
    pub eta: f64,
    pub m_step_mode: MStepMode,
    /// Upper-layer candidates considered by neighbor selection.
    pub candidate_pool: usize,
    pub rng_seed: u64,
    pub sigma2_init: f64,
    /// Re-estimate σ² each iteration.
    pub update_sigma: bool,
    /// Re-select E_V each iteration (non-top layers).
    pub update_neighbors: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            tau: 0.1,
            m: 15,
            t: 20,
            beta: 1.0,
            eta: 0.05,
            m_step_mode: MStepMode::ClosedForm,
            candidate_pool: 100,
            rng_seed: 0,
            sigma2_init: 0.0025,
            update_sigma: true,
            update_neighbors: true,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if self.m == 0 {
            return fail("M must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail("eta must be positive");
        }
        if self.candidate_pool < self.m {
            return fail("candidate pool must hold at least M nodes");
        }
        if !(self.sigma2_init >= SIGMA2_MIN && self.sigma2_init.is_finite()) {
            return fail("sigma2_init must be at least the variance floor");
        }
        Ok(())
    }
}

/// Per-layer entry of `layers.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub layer_id: String,
    /// Patterns per filter.
    #[serde(rename = "N")]
    pub n: usize,
    /// Filter count; taken from the data when absent.
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
}

/// `layers.json`: layer list (bottom to top) plus learning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayersFile {
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(rename = "M", default = "defaults::m")]
    pub m: usize,
    #[serde(rename = "T", default = "defaults::t")]
    pub t: usize,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default)]
    pub m_step_mode: MStepMode,
    #[serde(default = "defaults::pool")]
    pub candidate_pool: usize,
    #[serde(default = "defaults::sigma2_init")]
    pub sigma2_init: f64,
    pub layers: Vec<LayerEntry>,
}

mod defaults {
    pub fn tau() -> f64 {
        0.1
    }
    pub fn m() -> usize {
        15
    }
    pub fn t() -> usize {
        20
    }
    pub fn beta() -> f64 {
        1.0
    }
    pub fn eta() -> f64 {
        0.05
    }
    pub fn pool() -> usize {
        100
    }
    pub fn sigma2_init() -> f64 {
        0.0025
    }
}

impl LayersFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layers file serializes") + "\n"
    }

    pub fn learn_config(&self, seed: u64) -> LearnConfig {
        LearnConfig {
            tau: self.tau,
            m: self.m,
            t: self.t,
            beta: self.beta,
            eta: self.eta,
            m_step_mode: self.m_step_mode,
            candidate_pool: self.candidate_pool,
            rng_seed: seed,
            sigma2_init: self.sigma2_init,
            ..LearnConfig::default()
        }
    }

    /// Layer specs with `D` filled in by `filters_of` where the file omits it.
    pub fn layer_specs(&self, mut filters_of: impl FnMut(&str) -> Option<usize>) -> Result<Vec<LayerSpec>> {
        self.layers
            .iter()
            .map(|e| {
                let filters = match (e.d, filters_of(&e.layer_id)) {
                    (Some(d), Some(found)) if d != found => {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {} declares D = {d} but data has {found}",
                            e.layer_id
                        )))
                    }
                    (Some(d), _) => d,
                    (None, Some(found)) => found,
                    (None, None) => {
                        return Err(Error::InvalidConfig(format!("no filter count for layer {}", e.layer_id)))
                    }
                };
                if e.n == 0 {
                    return Err(Error::InvalidConfig(format!("layer {} needs N >= 1", e.layer_id)));
                }
                Ok(LayerSpec {
                    layer_id: e.layer_id.clone(),
                    filters,
                    patterns_per_filter: e.n,
                })
            })
            .collect()
    }

    pub fn from_specs(specs: &[LayerSpec], config: &LearnConfig) -> Self {
        LayersFile {
            tau: config.tau,
            m: config.m,
            t: config.t,
            beta: config.beta,
            eta: config.eta,
            m_step_mode: config.m_step_mode,
            candidate_pool: config.candidate_pool,
            sigma2_init: config.sigma2_init,
            layers: specs
                .iter()
                .map(|s| LayerEntry {
                    layer_id: s.layer_id.clone(),
                    n: s.patterns_per_filter,
                    d: Some(s.filters),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let f: LayersFile = serde_json::from_str(r#"{"layers":[{"layer_id":"conv5","N":20}]}"#).unwrap();
        let c = f.learn_config(7);
        assert_eq!((c.tau, c.m, c.t, c.beta), (0.1, 15, 20, 1.0));
        assert_eq!(c.m_step_mode, MStepMode::ClosedForm);
        assert_eq!(c.rng_seed, 7);
        c.validate().unwrap();
        let specs = f.layer_specs(|_| Some(512)).unwrap();
        assert_eq!(specs[0].filters, 512);
        assert_eq!(specs[0].patterns_per_filter, 20);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(serde_json::from_str::<LayersFile>(r#"{"layers":[],"gamma":1}"#).is_err());
        let c = LearnConfig {
            candidate_pool: 3,
            m: 5,
            ..LearnConfig::default()
        };
        assert!(c.validate().is_err());
        let f: LayersFile = serde_json::from_str(r#"{"layers":[{"layer_id":"a","N":2,"D":4}]}"#).unwrap();
        assert!(matches!(f.layer_specs(|_| Some(8)), Err(Error::ShapeMismatch(_))));
    }
}
