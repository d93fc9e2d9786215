//! Exact-scan cosine index over adapter-tagged chunks.
//!
//! Rows are grouped by adapter tag so that dropping a tag is a single map
//! removal. Every row carries a monotonically increasing handle; search
//! results are ordered by descending score with ties going to the earlier
//! insertion.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{round_f32, AdapterId};
use crate::codec::{self, F32Reader};
use crate::embedding::{dot, Chunk, EmbeddingVector};
use crate::error::{Error, Result};

pub const STORE_FORMAT_VERSION: u8 = 1;
pub const STORE_EXTENSION: &str = "acstore";
const STORE_MAGIC: [u8; 4] = *b"ACST";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkHandle(u64);

#[cfg(test)]
impl ChunkHandle {
    pub(crate) fn default_for_tests() -> Self {
        ChunkHandle(0)
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddedChunk {
    pub chunk: Chunk,
    pub embedding: EmbeddingVector,
    pub adapter_tag: AdapterId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredChunk {
    pub handle: ChunkHandle,
    pub score: f64,
    pub adapter_tag: AdapterId,
    pub chunk: Arc<Chunk>,
}

/// An ingested document reassembled from its chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredDocument {
    pub doc_id: String,
    pub adapter_tag: AdapterId,
    pub text: String,
}

#[derive(Clone, Debug)]
struct Row {
    handle: ChunkHandle,
    chunk: Arc<Chunk>,
    // f32-representable values, so persistence is lossless
    embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VectorStore {
    dim: usize,
    segments: HashMap<AdapterId, Vec<Row>>,
    next_handle: u64,
    len: usize,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            segments: HashMap::new(),
            next_handle: 0,
            len: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tag_count(&self, tag: &AdapterId) -> usize {
        self.segments.get(tag).map_or(0, Vec::len)
    }

    pub fn tags(&self) -> Vec<AdapterId> {
        let mut tags: Vec<_> = self.segments.keys().cloned().collect();
        tags.sort();
        tags
    }

    /// Documents in first-insertion order. Chunks of one document under
    /// one tag are joined with single spaces, which restores the document's
    /// token sequence.
    pub fn documents(&self) -> Vec<StoredDocument> {
        let mut docs: BTreeMap<(ChunkHandle, &AdapterId, &str), Vec<&Chunk>> = BTreeMap::new();
        for (tag, rows) in &self.segments {
            let mut first: HashMap<&str, ChunkHandle> = HashMap::new();
            for row in rows {
                let h = *first.entry(row.chunk.doc_id.as_str()).or_insert(row.handle);
                docs.entry((h, tag, row.chunk.doc_id.as_str())).or_default().push(&row.chunk);
            }
        }
        docs.into_iter()
            .map(|((_, tag, doc_id), mut chunks)| {
                chunks.sort_by_key(|c| c.seq_no);
                StoredDocument {
                    doc_id: doc_id.to_owned(),
                    adapter_tag: tag.clone(),
                    text: chunks.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" "),
                }
            })
            .collect()
    }

    /// Identical chunks are not deduplicated.
    pub fn insert(&mut self, ec: EmbeddedChunk) -> Result<ChunkHandle> {
        if ec.embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: ec.embedding.dim(),
            });
        }
        let handle = ChunkHandle(self.next_handle);
        self.next_handle += 1;
        self.segments.entry(ec.adapter_tag).or_default().push(Row {
            handle,
            chunk: Arc::new(ec.chunk),
            embedding: ec.embedding.values().iter().copied().map(round_f32).collect(),
        });
        self.len += 1;
        Ok(handle)
    }

    pub fn remove_by_tag(&mut self, tag: &AdapterId) -> usize {
        let removed = self.segments.remove(tag).map_or(0, |rows| rows.len());
        self.len -= removed;
        removed
    }

    /// Top `fetch_k` chunks by cosine similarity to `query`. With
    /// `allowed_tags`, only chunks carrying one of those tags are scored.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        fetch_k: usize,
        allowed_tags: Option<&HashSet<AdapterId>>,
    ) -> Result<Vec<ScoredChunk>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let segments: Vec<(&AdapterId, &Vec<Row>)> = match allowed_tags {
            Some(allowed) => allowed
                .iter()
                .filter_map(|t| self.segments.get_key_value(t))
                .collect(),
            None => self.segments.iter().collect(),
        };
        let mut scored: Vec<ScoredChunk> = segments
            .into_iter()
            .flat_map(|(tag, rows)| {
                rows.iter().map(move |row| ScoredChunk {
                    handle: row.handle,
                    score: dot(query.values(), &row.embedding),
                    adapter_tag: tag.clone(),
                    chunk: row.chunk.clone(),
                })
            })
            .collect();
        let order = |a: &ScoredChunk, b: &ScoredChunk| -> Ordering {
            b.score.total_cmp(&a.score).then(a.handle.cmp(&b.handle))
        };
        if fetch_k < scored.len() {
            if fetch_k == 0 {
                return Ok(Vec::new());
            }
            scored.select_nth_unstable_by(fetch_k - 1, order);
            scored.truncate(fetch_k);
        }
        scored.sort_unstable_by(order);
        Ok(scored)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest, blob) = self.encode();
        codec::write_file(path, STORE_MAGIC, STORE_FORMAT_VERSION, &manifest, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = codec::read_file::<StoreManifest>(path, STORE_MAGIC, STORE_FORMAT_VERSION)?;
        Self::decode(c.manifest, &c.blob)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (manifest, blob) = self.encode();
        codec::encode(STORE_MAGIC, STORE_FORMAT_VERSION, &manifest, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = codec::decode::<StoreManifest>(STORE_MAGIC, STORE_FORMAT_VERSION, bytes)?;
        Self::decode(c.manifest, &c.blob)
    }

    fn rows_in_order(&self) -> Vec<(&AdapterId, &Row)> {
        let mut rows: Vec<_> = self
            .segments
            .iter()
            .flat_map(|(tag, rows)| rows.iter().map(move |r| (tag, r)))
            .collect();
        rows.sort_by_key(|(_, r)| r.handle);
        rows
    }

    fn encode(&self) -> (StoreManifest, Vec<u8>) {
        let rows = self.rows_in_order();
        let mut blob = Vec::with_capacity(rows.len() * self.dim * 4);
        for (_, row) in &rows {
            codec::push_f32s(&mut blob, row.embedding.iter().copied());
        }
        let chunks = rows
            .iter()
            .map(|(tag, row)| ChunkRecord {
                doc_id: row.chunk.doc_id.clone(),
                seq_no: row.chunk.seq_no,
                token_count: row.chunk.token_count,
                tag: (*tag).clone(),
                text: row.chunk.text.clone(),
            })
            .collect();
        let manifest = StoreManifest {
            format_version: STORE_FORMAT_VERSION,
            dim: self.dim,
            count: rows.len(),
            chunks,
            blob_crc32: codec::crc32(&blob),
        };
        (manifest, blob)
    }

    fn decode(manifest: StoreManifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch {
                expected: STORE_FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        if manifest.count != manifest.chunks.len() {
            return Err(Error::CorruptFile(format!(
                "count {} but {} chunk records",
                manifest.count,
                manifest.chunks.len()
            )));
        }
        if manifest.blob_crc32 != codec::crc32(blob) {
            return Err(Error::CorruptFile("manifest checksum disagrees with blob".into()));
        }
        let mut store = Self::new(manifest.dim);
        let mut reader = F32Reader::new(blob);
        for record in manifest.chunks {
            let embedding = reader.read(manifest.dim)?;
            let handle = ChunkHandle(store.next_handle);
            store.next_handle += 1;
            store.segments.entry(record.tag).or_default().push(Row {
                handle,
                chunk: Arc::new(Chunk {
                    doc_id: record.doc_id,
                    seq_no: record.seq_no,
                    text: record.text,
                    token_count: record.token_count,
                }),
                embedding,
            });
            store.len += 1;
        }
        reader.finish()?;
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    format_version: u8,
    dim: usize,
    count: usize,
    chunks: Vec<ChunkRecord>,
    blob_crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    doc_id: String,
    seq_no: usize,
    token_count: usize,
    tag: AdapterId,
    text: String,
}
