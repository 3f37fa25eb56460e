//! Explanatory graphs: a layered model of the part patterns hidden in the
//! feature maps of a pretrained CNN, learned top-down with EM.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aog;
pub mod error;
pub mod fmap;
pub mod geom;
pub mod graph;
pub mod inference;
pub mod learn;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use fmap::{Dataset, FeatureMap, FeatureMapSet, LayerMeta};
pub use geom::Point;
pub use graph::{Edge, ExplanatoryGraph, GraphLayer, Hyperparams, LayerSpec, NodeId, PatternNode};
pub use inference::{infer_dataset, infer_image, top_k_energy, NodeAssignment};
pub use learn::{learn_graph, LearnConfig, LearnedGraph, MStepMode};
