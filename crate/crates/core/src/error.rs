use crate::fmap::FmapError;
use crate::graph::{GraphError, NodeId};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Fmap(#[from] FmapError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("image {image}: no inference for neighbor {node}")]
    MissingNeighborInference { image: usize, node: NodeId },
    #[error("node {0} explains no activation entities")]
    ZeroTotalWeight(NodeId),
    #[error("node {node}: {have} neighbor candidates, need {need}")]
    InsufficientCandidates { node: NodeId, need: usize, have: usize },
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("image {image_id} has no layer {layer_id}")]
    LayerMissingInImage { image_id: String, layer_id: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("all scores are zero")]
    AllZeroScores,
    #[error("{have} usable samples, need at least {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("image {image_id} has no landmark {part}")]
    MissingLandmark { image_id: String, part: String },
    #[error("layer {layer} filter {filter}: no separated placement after {attempts} attempts")]
    SeparationUnsatisfiable { layer: usize, filter: usize, attempts: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no detected patterns")]
    NoDetectedPatterns,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Stable machine-readable name of the error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Fmap(e) => e.kind(),
            Error::Graph(e) => e.kind(),
            Error::MissingNeighborInference { .. } => "MissingNeighborInference",
            Error::ZeroTotalWeight(_) => "ZeroTotalWeight",
            Error::InsufficientCandidates { .. } => "InsufficientCandidates",
            Error::EmptyDataset => "EmptyDataset",
            Error::LayerMissingInImage { .. } => "LayerMissingInImage",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::AllZeroScores => "AllZeroScores",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::MissingLandmark { .. } => "MissingLandmark",
            Error::SeparationUnsatisfiable { .. } => "SeparationUnsatisfiable",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NoDetectedPatterns => "NoDetectedPatterns",
            Error::Io { .. } => "IoError",
            Error::Parse { .. } => "ParseError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reads and deserializes a JSON file.
pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
