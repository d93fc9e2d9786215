//! Dense reference model and the three adapter forward strategies.
//!
//! The model is a stack of affine layers with `tanh` between them (none
//! after the last). Adapter deltas enter each adapted layer before the
//! nonlinearity:
//!
//! ```text
//! z_ℓ = W_ℓ h + b_ℓ + Σ_i S_i · (α_i/r_i) · B_iℓ (A_iℓ h)
//! ```
//!
//! which makes output mixing and weight merging agree up to floating-point
//! reassociation.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::adapters::{round_f32, AdapterId, LowRankAdapter, LowRankLayerDelta};
use crate::codec::{self, F32Reader};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u8 = 1;
pub const MODEL_EXTENSION: &str = "acmodel";
const MODEL_MAGIC: [u8; 4] = *b"ACMD";

const PLAN_SUM_TOLERANCE: f64 = 1e-9;

/// `(d_in, d_out)` of every layer, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ModelSignature(Vec<(usize, usize)>);

impl ModelSignature {
    pub fn new(layers: Vec<(usize, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("model needs at least one layer".into()));
        }
        if layers.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(Error::ShapeMismatch("layer dimensions must be positive".into()));
        }
        if let Some(w) = layers.windows(2).find(|w| w[0].1 != w[1].0) {
            return Err(Error::ShapeMismatch(format!(
                "layer output {} does not feed input {}",
                w[0].1, w[1].0
            )));
        }
        Ok(Self(layers))
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn input_dim(&self) -> usize {
        self.0[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.0[self.0.len() - 1].1
    }
}

impl TryFrom<Vec<(usize, usize)>> for ModelSignature {
    type Error = Error;

    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ModelSignature> for Vec<(usize, usize)> {
    fn from(s: ModelSignature) -> Self {
        s.0
    }
}

/// xorshift64* generator used for every seeded initialization in the crate.
///
/// `x ^= x >> 12; x ^= x << 25; x ^= x >> 27; out = x * 0x2545F4914F6CDD1D`.
/// A zero seed is replaced by `0x9E3779B97F4A7C15`. Uniform reals take the
/// top 53 bits of the output.
#[derive(Clone, Debug)]
pub struct XorShift64Star(u64);

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        Self(if seed == 0 { 0x9E37_79B9_7F4A_7C15 } else { seed })
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * bound
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.symmetric(bound))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `d_out × d_in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceModel {
    layers: Vec<DenseLayer>,
    signature: ModelSignature,
    seed: Option<u64>,
}

impl ReferenceModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: bias has {} entries for {} outputs",
                    l.b.len(),
                    l.w.nrows()
                )));
            }
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("layer {i}: non-finite weight")));
            }
        }
        let signature = ModelSignature::new(layers.iter().map(|l| (l.w.ncols(), l.w.nrows())).collect())?;
        let layers = layers
            .into_iter()
            .map(|l| DenseLayer {
                w: l.w.mapv(round_f32),
                b: l.b.mapv(round_f32),
            })
            .collect();
        Ok(Self {
            layers,
            signature,
            seed: None,
        })
    }

    /// Deterministic initialization: `W ~ U[-1/√d_in, 1/√d_in)`, `b ~ U[-0.1, 0.1)`,
    /// drawn layer by layer (W row-major, then b) from [`XorShift64Star`].
    pub fn seeded(signature: &ModelSignature, seed: u64) -> Self {
        let mut rng = XorShift64Star::new(seed);
        let layers = signature
            .layers()
            .iter()
            .map(|&(d_in, d_out)| {
                let w = rng.matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt());
                let b = Array1::from_shape_simple_fn(d_out, || rng.symmetric(0.1));
                DenseLayer { w, b }
            })
            .collect();
        let mut model = Self::new(layers).expect("signature already validated");
        model.seed = Some(seed);
        model
    }

    pub fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn forward_base(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.run(x, &[])
    }

    pub fn forward_mixed(&self, x: &Array1<f64>, plan: &MixPlan) -> Result<Array1<f64>> {
        for (adapter, _) in plan.entries() {
            adapter.check_against(&self.signature)?;
        }
        let entries: Vec<(&LowRankAdapter, f64)> = plan.entries().iter().map(|(a, s)| (a.as_ref(), *s)).collect();
        self.run(x, &entries)
    }

    /// Output-averaging baseline: every adapter weighted `1/n`.
    pub fn forward_avg_baseline(&self, x: &Array1<f64>, adapters: &[Arc<LowRankAdapter>]) -> Result<Array1<f64>> {
        self.forward_mixed(x, &MixPlan::uniform(adapters.to_vec()))
    }

    /// Weight-merging baseline: a new model with
    /// `W'_ℓ = W_ℓ + Σ_i w_i·(α_i/r_i)·B_iℓ A_iℓ`.
    pub fn merge_weights(&self, adapters: &[Arc<LowRankAdapter>], weights: &[f64]) -> Result<ReferenceModel> {
        if adapters.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} adapters but {} weights",
                adapters.len(),
                weights.len()
            )));
        }
        if !adapters.is_empty() {
            check_weights(weights)?;
        }
        let mut layers = self.layers.clone();
        for (adapter, &weight) in adapters.iter().zip(weights) {
            adapter.check_against(&self.signature)?;
            for delta in adapter.deltas() {
                let delta_w = delta.b.dot(&delta.a);
                layers[delta.layer_index]
                    .w
                    .scaled_add(weight * adapter.scale(), &delta_w);
            }
        }
        // merged weights are not rounded to f32: this model is for evaluation, not storage
        Ok(ReferenceModel {
            layers,
            signature: self.signature.clone(),
            seed: None,
        })
    }

    fn run(&self, x: &Array1<f64>, entries: &[(&LowRankAdapter, f64)]) -> Result<Array1<f64>> {
        if x.len() != self.signature.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.signature.input_dim(),
                found: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.dot(&h) + &layer.b;
            for (adapter, weight) in entries {
                if let Some(delta) = adapter.delta(index) {
                    let y = delta.b.dot(&delta.a.dot(&h));
                    z.scaled_add(weight * adapter.scale(), &y);
                }
            }
            if index < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        for layer in &self.layers {
            codec::push_f32s(&mut blob, layer.w.iter().copied());
            codec::push_f32s(&mut blob, layer.b.iter().copied());
        }
        let manifest = ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            signature: self.signature.clone(),
            nonlinearity: "tanh".into(),
            seed: self.seed,
            blob_crc32: codec::crc32(&blob),
        };
        codec::write_file(path, MODEL_MAGIC, MODEL_FORMAT_VERSION, &manifest, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = codec::read_file::<ModelManifest>(path, MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
        let m = c.manifest;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch {
                expected: MODEL_FORMAT_VERSION,
                found: m.format_version,
            });
        }
        if m.nonlinearity != "tanh" {
            return Err(Error::CorruptFile(format!("unsupported nonlinearity {:?}", m.nonlinearity)));
        }
        if m.blob_crc32 != codec::crc32(&c.blob) {
            return Err(Error::CorruptFile("manifest checksum disagrees with blob".into()));
        }
        let mut reader = F32Reader::new(&c.blob);
        let mut layers = Vec::new();
        for &(d_in, d_out) in m.signature.layers() {
            let w = Array2::from_shape_vec((d_out, d_in), reader.read(d_out * d_in)?)
                .map_err(|e| Error::CorruptFile(e.to_string()))?;
            let b = Array1::from(reader.read(d_out)?);
            layers.push(DenseLayer { w, b });
        }
        reader.finish()?;
        let mut model = Self::new(layers)?;
        model.seed = m.seed;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u8,
    signature: ModelSignature,
    nonlinearity: String,
    seed: Option<u64>,
    blob_crc32: u32,
}

/// Adapters to mix with their normalized weights.
///
/// Weights lie in `[0, 1]` and sum to 1 within 1e-9; a plan with no entries
/// is the empty plan, under which the model runs unadapted.
#[derive(Clone, Debug, Default)]
pub struct MixPlan {
    entries: Vec<(Arc<LowRankAdapter>, f64)>,
}

impl MixPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<(Arc<LowRankAdapter>, f64)>) -> Result<Self> {
        if !entries.is_empty() {
            let weights: Vec<f64> = entries.iter().map(|(_, w)| *w).collect();
            check_weights(&weights).map_err(|e| Error::InvalidPlan(e.to_string()))?;
        }
        let mut seen = std::collections::HashSet::new();
        if let Some((dup, _)) = entries.iter().find(|(a, _)| !seen.insert(a.id().clone())) {
            return Err(Error::InvalidPlan(format!("adapter {} appears twice", dup.id())));
        }
        Ok(Self { entries })
    }

    pub fn uniform(adapters: Vec<Arc<LowRankAdapter>>) -> Self {
        let weight = 1.0 / adapters.len().max(1) as f64;
        Self {
            entries: adapters.into_iter().map(|a| (a, weight)).collect(),
        }
    }

    pub fn entries(&self) -> &[(Arc<LowRankAdapter>, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn weights(&self) -> Vec<(AdapterId, f64)> {
        self.entries.iter().map(|(a, w)| (a.id().clone(), *w)).collect()
    }

    pub fn adapters(&self) -> Vec<Arc<LowRankAdapter>> {
        self.entries.iter().map(|(a, _)| a.clone()).collect()
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && (0.0..=1.0).contains(*w))) {
        return Err(Error::InvalidPlan(format!("weight {w} outside [0, 1]")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > PLAN_SUM_TOLERANCE {
        return Err(Error::InvalidPlan(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Random adapter over `layers` of `signature`; factor entries are
/// `U[-scale, scale)` from a [`XorShift64Star`] seeded with `seed`.
pub fn seeded_adapter(
    id: AdapterId,
    signature: &ModelSignature,
    layers: &[usize],
    rank: usize,
    alpha: f64,
    scale: f64,
    seed: u64,
) -> Result<LowRankAdapter> {
    let mut rng = XorShift64Star::new(seed);
    let mut deltas = Vec::with_capacity(layers.len());
    for &index in layers {
        let &(d_in, d_out) = signature
            .layers()
            .get(index)
            .ok_or_else(|| Error::ShapeMismatch(format!("no layer {index}")))?;
        let a = rng.matrix(rank, d_in, scale);
        let b = rng.matrix(d_out, rank, scale);
        deltas.push(LowRankLayerDelta::new(index, a, b));
    }
    LowRankAdapter::new(id, rank, alpha, deltas)
}
