//! Low-rank adapters and the registry that serves them.
//!
//! An adapter perturbs selected linear layers of the reference model with a
//! rank-`r` update: the layer map gains `x ↦ (α/r)·B(Ax)` where `A` is
//! `r×d_in` and `B` is `d_out×r`. Parameters are held at f32 precision so
//! that persisted adapters reload bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::codec::{self, F32Reader};
use crate::error::{Error, Result};
use crate::model::ModelSignature;

pub const ADAPTER_FORMAT_VERSION: u8 = 1;
pub const ADAPTER_EXTENSION: &str = "acadapter";
const ADAPTER_MAGIC: [u8; 4] = *b"ACAD";

/// Adapter name, restricted to `[A-Za-z0-9_.-]+`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AdapterId(String);

impl AdapterId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let valid = !id.is_empty()
            && id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'));
        if valid {
            Ok(Self(id))
        } else {
            Err(Error::InvalidAdapterId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AdapterId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<AdapterId> for String {
    fn from(id: AdapterId) -> Self {
        id.0
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for AdapterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

/// The `(A, B)` factor pair for one adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankLayerDelta {
    pub layer_index: usize,
    /// `r × d_in` down-projection.
    pub a: Array2<f64>,
    /// `d_out × r` up-projection.
    pub b: Array2<f64>,
}

impl LowRankLayerDelta {
    pub fn new(layer_index: usize, a: Array2<f64>, b: Array2<f64>) -> Self {
        Self {
            layer_index,
            a: a.mapv(round_f32),
            b: b.mapv(round_f32),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    id: AdapterId,
    rank: usize,
    alpha: f64,
    deltas: BTreeMap<usize, LowRankLayerDelta>,
    pub metadata: BTreeMap<String, String>,
    pub hintable: bool,
}

impl LowRankAdapter {
    /// Validates that every delta has rank `rank`, that `A` and `B` agree on
    /// it, that `1 ≤ r ≤ min(d_in, d_out)`, and that layer indices are distinct.
    pub fn new(id: AdapterId, rank: usize, alpha: f64, deltas: Vec<LowRankLayerDelta>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ShapeMismatch("rank must be at least 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::ShapeMismatch(format!("alpha must be positive, got {alpha}")));
        }
        let mut by_layer = BTreeMap::new();
        for delta in deltas {
            let (a_rows, b_cols) = (delta.a.nrows(), delta.b.ncols());
            if a_rows != rank || b_cols != rank {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: A is {}x{}, B is {}x{}, adapter rank is {rank}",
                    delta.layer_index,
                    a_rows,
                    delta.a.ncols(),
                    delta.b.nrows(),
                    b_cols
                )));
            }
            if rank > delta.d_in().min(delta.d_out()) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: rank {rank} exceeds min(d_in={}, d_out={})",
                    delta.layer_index,
                    delta.d_in(),
                    delta.d_out()
                )));
            }
            if let Some(prev) = by_layer.insert(delta.layer_index, delta) {
                return Err(Error::ShapeMismatch(format!("layer {} adapted twice", prev.layer_index)));
            }
        }
        Ok(Self {
            id,
            rank,
            alpha: round_f32(alpha),
            deltas: by_layer,
            metadata: BTreeMap::new(),
            hintable: true,
        })
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn with_hintable(mut self, hintable: bool) -> Self {
        self.hintable = hintable;
        self
    }

    pub fn id(&self) -> &AdapterId {
        &self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The `α/r` multiplier applied to `B·A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self, layer_index: usize) -> Option<&LowRankLayerDelta> {
        self.deltas.get(&layer_index)
    }

    pub fn deltas(&self) -> impl Iterator<Item = &LowRankLayerDelta> {
        self.deltas.values()
    }

    /// Check every adapted layer exists in `signature` with matching shape.
    pub fn check_against(&self, signature: &ModelSignature) -> Result<()> {
        for delta in self.deltas() {
            let Some(&(d_in, d_out)) = signature.layers().get(delta.layer_index) else {
                return Err(Error::ShapeMismatch(format!(
                    "adapter {} targets layer {} but the model has {} layers",
                    self.id,
                    delta.layer_index,
                    signature.layers().len()
                )));
            };
            if (delta.d_in(), delta.d_out()) != (d_in, d_out) {
                return Err(Error::ShapeMismatch(format!(
                    "adapter {} layer {} is {}->{}, model layer is {d_in}->{d_out}",
                    self.id,
                    delta.layer_index,
                    delta.d_in(),
                    delta.d_out()
                )));
            }
        }
        Ok(())
    }

    /// Materialize `ΔW = (α/r)·B·A` for one layer.
    pub fn effective_delta(&self, layer_index: usize) -> Result<EffectiveDelta> {
        let delta = self.delta(layer_index).ok_or_else(|| Error::LayerNotAdapted {
            adapter: self.id.to_string(),
            layer: layer_index,
        })?;
        Ok(EffectiveDelta {
            layer_index,
            delta_w: delta.b.dot(&delta.a) * self.scale(),
        })
    }

    /// Factored application `(α/r)·B(A x)` without materializing `ΔW`.
    pub fn apply(&self, layer_index: usize, x: &Array1<f64>) -> Option<Array1<f64>> {
        self.delta(layer_index)
            .map(|d| d.b.dot(&d.a.dot(x)) * self.scale())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (manifest, blob) = self.encode();
        codec::encode(ADAPTER_MAGIC, ADAPTER_FORMAT_VERSION, &manifest, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = codec::decode(ADAPTER_MAGIC, ADAPTER_FORMAT_VERSION, bytes)?;
        Self::decode(c.manifest, &c.blob)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest, blob) = self.encode();
        codec::write_file(path, ADAPTER_MAGIC, ADAPTER_FORMAT_VERSION, &manifest, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = codec::read_file(path, ADAPTER_MAGIC, ADAPTER_FORMAT_VERSION)?;
        Self::decode(c.manifest, &c.blob)
    }

    fn encode(&self) -> (AdapterManifest, Vec<u8>) {
        let mut blob = Vec::new();
        for d in self.deltas() {
            codec::push_f32s(&mut blob, d.a.iter().copied());
            codec::push_f32s(&mut blob, d.b.iter().copied());
        }
        let manifest = AdapterManifest {
            format_version: ADAPTER_FORMAT_VERSION,
            id: self.id.clone(),
            r: self.rank,
            alpha: self.alpha,
            hintable: self.hintable,
            metadata: self.metadata.clone(),
            layers: self
                .deltas()
                .map(|d| LayerShape {
                    layer_index: d.layer_index,
                    d_in: d.d_in(),
                    d_out: d.d_out(),
                })
                .collect(),
            blob_crc32: codec::crc32(&blob),
        };
        (manifest, blob)
    }

    fn decode(manifest: AdapterManifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != ADAPTER_FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch {
                expected: ADAPTER_FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        if manifest.blob_crc32 != codec::crc32(blob) {
            return Err(Error::CorruptFile("manifest checksum disagrees with blob".into()));
        }
        let mut reader = F32Reader::new(blob);
        let mut deltas = Vec::with_capacity(manifest.layers.len());
        for shape in &manifest.layers {
            let a = reader.read(manifest.r * shape.d_in)?;
            let b = reader.read(shape.d_out * manifest.r)?;
            let a = Array2::from_shape_vec((manifest.r, shape.d_in), a)
                .map_err(|e| Error::CorruptFile(e.to_string()))?;
            let b = Array2::from_shape_vec((shape.d_out, manifest.r), b)
                .map_err(|e| Error::CorruptFile(e.to_string()))?;
            deltas.push(LowRankLayerDelta::new(shape.layer_index, a, b));
        }
        reader.finish()?;
        let mut adapter = Self::new(manifest.id, manifest.r, manifest.alpha, deltas)?;
        adapter.metadata = manifest.metadata;
        adapter.hintable = manifest.hintable;
        Ok(adapter)
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterManifest {
    format_version: u8,
    id: AdapterId,
    r: usize,
    alpha: f64,
    hintable: bool,
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerShape>,
    blob_crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct LayerShape {
    layer_index: usize,
    d_in: usize,
    d_out: usize,
}

/// Materialized `(α/r)·B·A` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveDelta {
    pub layer_index: usize,
    pub delta_w: Array2<f64>,
}

/// Adapters keyed by id, validated against one model signature.
///
/// Entries are reference-counted so a request can hold a snapshot of the
/// adapters it mixes while the registry is mutated.
#[derive(Clone, Debug)]
pub struct AdapterRegistry {
    signature: ModelSignature,
    adapters: HashMap<AdapterId, Arc<LowRankAdapter>>,
}

impl AdapterRegistry {
    pub fn new(signature: ModelSignature) -> Self {
        Self {
            signature,
            adapters: HashMap::new(),
        }
    }

    pub fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    pub fn register(&mut self, adapter: LowRankAdapter) -> Result<()> {
        if self.adapters.contains_key(adapter.id()) {
            return Err(Error::DuplicateId(adapter.id().to_string()));
        }
        adapter.check_against(&self.signature)?;
        self.adapters.insert(adapter.id().clone(), Arc::new(adapter));
        Ok(())
    }

    pub fn unregister(&mut self, id: &AdapterId) -> Result<Arc<LowRankAdapter>> {
        self.adapters
            .remove(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Swap in a new version of an already-registered adapter.
    pub fn replace(&mut self, adapter: LowRankAdapter) -> Result<Arc<LowRankAdapter>> {
        adapter.check_against(&self.signature)?;
        let slot = self
            .adapters
            .get_mut(adapter.id())
            .ok_or_else(|| Error::UnknownId(adapter.id().to_string()))?;
        Ok(std::mem::replace(slot, Arc::new(adapter)))
    }

    pub fn get(&self, id: &AdapterId) -> Option<&Arc<LowRankAdapter>> {
        self.adapters.get(id)
    }

    pub fn contains(&self, id: &AdapterId) -> bool {
        self.adapters.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Registered ids in sorted order (the positional order of a permission bit vector).
    pub fn ids(&self) -> Vec<AdapterId> {
        let mut ids: Vec<_> = self.adapters.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Write every adapter to `<dir>/<id>.acadapter`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for adapter in self.adapters.values() {
            adapter.save(&adapter_path(dir, adapter.id()))?;
        }
        Ok(())
    }

    /// Register every `.acadapter` file in `dir` (sorted by file name).
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == ADAPTER_EXTENSION))
            .collect();
        paths.sort();
        for path in &paths {
            self.register(LowRankAdapter::load(path)?)?;
        }
        Ok(paths.len())
    }
}

pub fn adapter_path(dir: &Path, id: &AdapterId) -> PathBuf {
    dir.join(format!("{id}.{ADAPTER_EXTENSION}"))
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
