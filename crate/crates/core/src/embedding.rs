//! Word tokenization, fixed-size chunking and text embedding.
//!
//! Tokens are whitespace-delimited words. Embeddings are unit-norm so that a
//! dot product is a cosine similarity. Two embedders are provided: a seeded
//! feature-hashing bag of words ([`HashEmbedder`]) and a client for an HTTP
//! embedding service ([`RemoteEmbedder`]).

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 100;
pub const DEFAULT_HASH_DIM: usize = 256;

const NORM_TOLERANCE: f64 = 1e-6;

/// An ordered list of non-empty word tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokenize(text: &str) -> Self {
        Self(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl From<&str> for TokenSequence {
    fn from(text: &str) -> Self {
        Self::tokenize(text)
    }
}

/// A contiguous window of a source document's tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub seq_no: usize,
    pub text: String,
    pub token_count: usize,
}

/// Split `text` into windows of `chunk_size` words. Every chunk but the last
/// is full; whitespace-only input yields no chunks.
///
/// # Panics
///
/// If `chunk_size` is zero.
pub fn chunk_document(doc_id: &str, text: &str, chunk_size: usize) -> Vec<Chunk> {
    assert!(chunk_size >= 1, "chunk_size must be positive");
    let tokens = TokenSequence::tokenize(text);
    tokens
        .tokens()
        .chunks(chunk_size)
        .enumerate()
        .map(|(seq_no, window)| Chunk {
            doc_id: doc_id.to_owned(),
            seq_no,
            text: window.join(" "),
            token_count: window.len(),
        })
        .collect()
}

/// A unit-norm real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Scale `values` to unit L2 norm. Zero and non-finite vectors are rejected.
    pub fn normalize(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::DegenerateVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    /// Wrap values that are already unit-norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::DegenerateVector);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors, i.e. their dot product.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(a.values(), b.values()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Seeded feature-hashing bag of words.
///
/// Each token adds 1.0 to coordinate `fnv1a64(seed_le || token) mod dim`;
/// the count vector is then L2-normalized. Collisions are not resolved.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Coordinate that `token` increments.
    pub fn bucket(&self, token: &str) -> usize {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let hash = self
            .seed
            .to_le_bytes()
            .iter()
            .chain(token.as_bytes())
            .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME));
        (hash % self.dim as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_HASH_DIM,
            seed: 0,
        }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut counts = vec![0.0; self.dim];
        let mut any = false;
        for token in text.split_whitespace() {
            counts[self.bucket(token)] += 1.0;
            any = true;
        }
        if !any {
            return Err(Error::EmptyInput);
        }
        EmbeddingVector::normalize(counts)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for a remote embedding service speaking
/// `POST /embed {"texts": [..]} -> {"vectors": [[..]], "dim": n}`.
///
/// Responses are re-normalized and checked against the configured dim.
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            endpoint: format!("{}/embed", base_url.trim_end_matches('/')),
            dim,
            agent,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.split_whitespace().next().is_none()) {
            return Err(Error::EmptyInput);
        }
        let response: EmbedResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Remote(e.to_string()))?;
        if response.vectors.len() != texts.len() {
            return Err(Error::Remote(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                response.vectors.len()
            )));
        }
        if response.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: response.dim,
            });
        }
        response
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        found: v.len(),
                    });
                }
                EmbeddingVector::normalize(v)
            })
            .collect()
    }
}
