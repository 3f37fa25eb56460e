//! Feature-map container I/O, response normalization and unit projection.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes  magic "FMAP0001"
//! offset 8   u32      header length in bytes (n)
//! offset 12  n bytes  UTF-8 JSON header (layer metadata, image id, image size)
//! offset 12+n         D·H·W f32 values, d-major then row-major (i, then j)
//! ```

use crate::geom::Point;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"FMAP0001";
const PREFIX_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FmapError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("header parse error at byte {offset}: {message}")]
    HeaderParseError { offset: usize, message: String },
    #[error("payload size mismatch at byte {offset}: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at byte {offset}")]
    NonFiniteValue { offset: usize },
    #[error("invalid layer metadata: {0}")]
    InvalidMeta(String),
    #[error("unit ({i},{j}) outside {h}x{w} grid")]
    IndexOutOfRange { i: usize, j: usize, h: usize, w: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FmapError {
    pub fn kind(&self) -> &'static str {
        match self {
            FmapError::BadMagic { .. } => "BadMagic",
            FmapError::HeaderParseError { .. } => "HeaderParseError",
            FmapError::PayloadSizeMismatch { .. } => "PayloadSizeMismatch",
            FmapError::NonFiniteValue { .. } => "NonFiniteValue",
            FmapError::InvalidMeta(_) => "InvalidMeta",
            FmapError::IndexOutOfRange { .. } => "IndexOutOfRange",
            FmapError::Manifest(_) => "ManifestError",
            FmapError::Io { .. } => "IoError",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        FmapError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Shape of one conv-layer output plus the parameters mapping its units
/// onto the image plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    pub layer_id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels between receptive-field centers of adjacent units.
    pub stride_px: f64,
    /// Pixel position `(x, y)` of the receptive-field center of unit (0,0).
    pub offset_px: [f64; 2],
    pub image_width_px: f64,
    pub image_height_px: f64,
    pub image_diag_px: f64,
}

impl LayerMeta {
    /// Metadata for a square image with receptive-field centers at
    /// `offset + stride·k`, the common layout for strided conv stacks.
    pub fn square(layer_id: &str, depth: usize, grid: usize, stride_px: f64, image_px: f64) -> Self {
        LayerMeta {
            layer_id: layer_id.to_string(),
            depth,
            height: grid,
            width: grid,
            stride_px,
            offset_px: [stride_px / 2.0, stride_px / 2.0],
            image_width_px: image_px,
            image_height_px: image_px,
            image_diag_px: image_px * std::f64::consts::SQRT_2,
        }
    }

    pub fn validate(&self) -> Result<(), FmapError> {
        let bad = |m: &str| Err(FmapError::InvalidMeta(format!("{}: {m}", self.layer_id)));
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return bad("D, H and W must be at least 1");
        }
        if !(self.stride_px > 0.0 && self.stride_px.is_finite()) {
            return bad("stride_px must be positive");
        }
        if !(self.image_width_px > 0.0 && self.image_height_px > 0.0) {
            return bad("image dimensions must be positive");
        }
        if !(self.image_diag_px > 0.0 && self.image_diag_px.is_finite()) {
            return bad("image_diag_px must be positive");
        }
        if !self.offset_px.iter().all(|o| o.is_finite()) {
            return bad("offset_px must be finite");
        }
        Ok(())
    }

    pub fn units_per_filter(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid step expressed in normalized horizontal image units.
    pub fn step_normalized(&self) -> f64 {
        self.stride_px / self.image_width_px
    }

    pub fn linear_index(&self, d: usize, i: usize, j: usize) -> usize {
        (d * self.height + i) * self.width + j
    }
}

/// Projects grid coordinates `(i, j)` to the normalized image plane,
/// clamping receptive-field centers that fall outside the image.
pub fn project_position(i: usize, j: usize, meta: &LayerMeta) -> Result<Point, FmapError> {
    if i >= meta.height || j >= meta.width {
        return Err(FmapError::IndexOutOfRange {
            i,
            j,
            h: meta.height,
            w: meta.width,
        });
    }
    Ok(project_unchecked(i, j, meta))
}

fn project_unchecked(i: usize, j: usize, meta: &LayerMeta) -> Point {
    let x = meta.offset_px[0] + meta.stride_px * j as f64;
    let y = meta.offset_px[1] + meta.stride_px * i as f64;
    Point::new(x / meta.image_width_px, y / meta.image_height_px).clamp_unit()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    image_id: String,
    layer_id: String,
    depth: usize,
    height: usize,
    width: usize,
    stride_px: f64,
    offset_px: [f64; 2],
    image_width_px: f64,
    image_height_px: f64,
    image_diag_px: f64,
}

/// Raw activations of one layer for one image, shape `D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub meta: LayerMeta,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(image_id: impl Into<String>, meta: LayerMeta, values: Vec<f32>) -> Result<Self, FmapError> {
        meta.validate()?;
        if values.len() != meta.len() {
            return Err(FmapError::PayloadSizeMismatch {
                offset: 0,
                expected: meta.len() * 4,
                actual: values.len() * 4,
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(FmapError::NonFiniteValue { offset: k * 4 });
        }
        Ok(FeatureMap {
            image_id: image_id.into(),
            meta,
            values,
        })
    }

    pub fn zeros(image_id: impl Into<String>, meta: LayerMeta) -> Self {
        let n = meta.len();
        FeatureMap {
            image_id: image_id.into(),
            meta,
            values: vec![0.0; n],
        }
    }

    pub fn get(&self, d: usize, i: usize, j: usize) -> f32 {
        self.values[self.meta.linear_index(d, i, j)]
    }

    /// Values of filter `d` in row-major order.
    pub fn channel(&self, d: usize) -> &[f32] {
        let n = self.meta.units_per_filter();
        &self.values[d * n..(d + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let header = Header {
            image_id: self.image_id.clone(),
            layer_id: m.layer_id.clone(),
            depth: m.depth,
            height: m.height,
            width: m.width,
            stride_px: m.stride_px,
            offset_px: m.offset_px,
            image_width_px: m.image_width_px,
            image_height_px: m.image_height_px,
            image_diag_px: m.image_diag_px,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FmapError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FmapError::BadMagic { offset: 0 });
        }
        if bytes.len() < PREFIX_LEN {
            return Err(FmapError::HeaderParseError {
                offset: MAGIC.len(),
                message: "truncated header length".into(),
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = PREFIX_LEN + hlen;
        if bytes.len() < payload_start {
            return Err(FmapError::HeaderParseError {
                offset: PREFIX_LEN,
                message: format!("header declares {hlen} bytes, file ends early"),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start]).map_err(|e| {
            FmapError::HeaderParseError {
                offset: PREFIX_LEN,
                message: e.to_string(),
            }
        })?;
        let meta = LayerMeta {
            layer_id: header.layer_id,
            depth: header.depth,
            height: header.height,
            width: header.width,
            stride_px: header.stride_px,
            offset_px: header.offset_px,
            image_width_px: header.image_width_px,
            image_height_px: header.image_height_px,
            image_diag_px: header.image_diag_px,
        };
        meta.validate().map_err(|e| FmapError::HeaderParseError {
            offset: PREFIX_LEN,
            message: e.to_string(),
        })?;
        let expected = meta
            .len()
            .checked_mul(4)
            .ok_or_else(|| FmapError::HeaderParseError {
                offset: PREFIX_LEN,
                message: "tensor size overflows".into(),
            })?;
        let actual = bytes.len() - payload_start;
        if actual != expected {
            return Err(FmapError::PayloadSizeMismatch {
                offset: payload_start,
                expected,
                actual,
            });
        }
        let mut values = Vec::with_capacity(meta.len());
        for (k, c) in bytes[payload_start..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(FmapError::NonFiniteValue {
                    offset: payload_start + 4 * k,
                });
            }
            values.push(v);
        }
        Ok(FeatureMap {
            image_id: header.image_id,
            meta,
            values,
        })
    }
}

pub fn load_fmap(path: impl AsRef<Path>) -> Result<FeatureMap, FmapError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FmapError::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}

pub fn write_fmap(path: impl AsRef<Path>, fm: &FeatureMap) -> Result<(), FmapError> {
    let path = path.as_ref();
    fs::write(path, fm.to_bytes()).map_err(|e| FmapError::io(path, e))
}

/// One feature-map unit with its projected position and entity count.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Unit {
    pub d: usize,
    pub i: usize,
    pub j: usize,
    pub p: Point,
    /// Normalized response `f_x`.
    pub f: f64,
    /// Activation-entity count `F(x) = β·max(f_x, 0)`.
    pub entities: f64,
}

/// Normalizes by the per-image, per-layer maximum activation and computes
/// entity counts. Units come back in linear (d-major, row-major) order.
pub fn normalize_responses(fm: &FeatureMap, beta: f64) -> Vec<Unit> {
    let scale = max_positive(&fm.values);
    let m = &fm.meta;
    let mut units = Vec::with_capacity(m.len());
    for d in 0..m.depth {
        for i in 0..m.height {
            for j in 0..m.width {
                let f = fm.get(d, i, j) as f64 / scale;
                units.push(Unit {
                    d,
                    i,
                    j,
                    p: project_unchecked(i, j, m),
                    f,
                    entities: beta * f.max(0.0),
                });
            }
        }
    }
    units
}

fn max_positive(values: &[f32]) -> f64 {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        max as f64
    } else {
        1.0
    }
}

/// All selected layers of one image, bottom to top.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub image_id: String,
    pub maps: Vec<FeatureMap>,
}

impl FeatureMapSet {
    pub fn layer(&self, layer_id: &str) -> Option<&FeatureMap> {
        self.maps.iter().find(|m| m.meta.layer_id == layer_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub layer_id: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub layers: Vec<ManifestLayer>,
}

pub type Manifest = Vec<ManifestEntry>;

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, FmapError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FmapError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FmapError::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<(), FmapError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| FmapError::io(path, e))
}

/// Every image of a manifest, loaded into memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<FeatureMapSet>,
}

impl Dataset {
    /// Loads a manifest; relative paths resolve against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, FmapError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = read_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut images = Vec::with_capacity(manifest.len());
        for entry in &manifest {
            let mut maps = Vec::with_capacity(entry.layers.len());
            for layer in &entry.layers {
                let fm = load_fmap(base.join(&layer.path))?;
                if fm.meta.layer_id != layer.layer_id {
                    return Err(FmapError::Manifest(format!(
                        "{}: header layer_id {} does not match manifest {}",
                        layer.path, fm.meta.layer_id, layer.layer_id
                    )));
                }
                maps.push(fm);
            }
            let mut ids: Vec<&str> = maps.iter().map(|m| m.meta.layer_id.as_str()).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(FmapError::Manifest(format!("duplicate layer_id in image {}", entry.image_id)));
            }
            images.push(FeatureMapSet {
                image_id: entry.image_id.clone(),
                maps,
            });
        }
        Ok(Dataset { images })
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|s| s.image_id.clone()).collect()
    }
}
