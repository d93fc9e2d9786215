//! Query orchestration: embed, retrieve, split by permission, weight, mix.
//!
//! Retrieval for the mix is a filtered search restricted to the user's live
//! grants, so nothing outside the grant set can influence which adapters
//! run or with what weight. When hints are enabled a second, unfiltered
//! search yields the candidate set `O`; its non-granted, hintable members
//! become hints. Only adapters with a positive aggregate score at or above
//! the threshold are mixed or hinted.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array1;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_path, AdapterId, AdapterRegistry, LowRankAdapter};
use crate::embedding::{chunk_document, Embedder, EmbeddingVector, DEFAULT_CHUNK_SIZE};
use crate::error::{Error, Result};
use crate::model::{MixPlan, ReferenceModel};
use crate::permissions::{partition, PermissionTable};
use crate::vector_store::{EmbeddedChunk, ScoredChunk, VectorStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Chunks fetched from the store.
    pub fetch_k: usize,
    /// Chunks kept for aggregation.
    pub k: usize,
    /// Minimum adapter aggregate score for mixing.
    pub threshold: f64,
    pub hints_enabled: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            fetch_k: 10,
            k: 3,
            threshold: 0.0,
            hints_enabled: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.fetch_k == 0 {
            return Err(Error::InvalidConfig("k and fetch_k must be positive".into()));
        }
        if self.k > self.fetch_k {
            return Err(Error::InvalidConfig(format!(
                "k ({}) must not exceed fetch_k ({})",
                self.k, self.fetch_k
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Per-adapter aggregate similarity scores, sorted by descending score then id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    entries: Vec<(AdapterId, f64)>,
}

impl CandidateSet {
    /// Wrap entries that are already in the desired order.
    pub fn from_ordered(entries: Vec<(AdapterId, f64)>) -> Self {
        Self { entries }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, (AdapterId, f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score(&self, id: &AdapterId) -> Option<f64> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    pub fn ids(&self) -> BTreeSet<AdapterId> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Mean chunk score per adapter tag.
pub fn aggregate_scores(chunks: &[ScoredChunk]) -> CandidateSet {
    let mut sums: HashMap<&AdapterId, (f64, usize)> = HashMap::new();
    for c in chunks {
        let slot = sums.entry(&c.adapter_tag).or_insert((0.0, 0));
        slot.0 += c.score;
        slot.1 += 1;
    }
    let mut entries: Vec<(AdapterId, f64)> = sums
        .into_iter()
        .map(|(id, (sum, n))| (id.clone(), sum / n as f64))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    CandidateSet { entries }
}

/// Mixing weights for permitted candidates: drop scores below `threshold`,
/// drop non-positive scores, normalize the rest to sum to one. An empty
/// result means the base model answers.
pub fn plan_weights(permitted: &CandidateSet, threshold: f64) -> Vec<(AdapterId, f64)> {
    let survivors: Vec<&(AdapterId, f64)> = permitted
        .iter()
        .filter(|(_, s)| is_relevant(*s, threshold))
        .collect();
    let total: f64 = survivors.iter().map(|(_, s)| s).sum();
    if survivors.is_empty() || total <= 0.0 {
        return Vec::new();
    }
    survivors.into_iter().map(|(id, s)| (id.clone(), s / total)).collect()
}

/// Whether an aggregate score makes an adapter eligible for mixing or hinting.
pub fn is_relevant(score: f64, threshold: f64) -> bool {
    score >= threshold && score > 0.0
}

/// Resolve [`plan_weights`] against the registry.
pub fn build_plan(permitted: &CandidateSet, threshold: f64, registry: &AdapterRegistry) -> Result<MixPlan> {
    let entries = plan_weights(permitted, threshold)
        .into_iter()
        .map(|(id, w)| {
            registry
                .get(&id)
                .cloned()
                .map(|a| (a, w))
                .ok_or_else(|| Error::UnknownId(id.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    MixPlan::new(entries)
}

/// Fold an embedding onto the model input width: `x_j = Σ_{i ≡ j (mod d)} q_i`.
pub fn query_features(query: &EmbeddingVector, input_dim: usize) -> Array1<f64> {
    let mut x = Array1::zeros(input_dim);
    for (i, v) in query.values().iter().enumerate() {
        x[i % input_dim] += v;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub id: AdapterId,
    pub score: f64,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub ttft_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub response: Vec<f64>,
    pub trace: String,
    pub active: Vec<(AdapterId, f64)>,
    pub hints: Vec<Hint>,
    pub timing: Timing,
}

/// Registries and model that a query reads together.
#[derive(Clone, Debug)]
pub struct State {
    pub model: Arc<ReferenceModel>,
    pub store: VectorStore,
    pub permissions: PermissionTable,
    pub adapters: AdapterRegistry,
}

impl State {
    pub fn new(model: ReferenceModel, store_dim: usize) -> Self {
        let adapters = AdapterRegistry::new(model.signature().clone());
        Self {
            model: Arc::new(model),
            store: VectorStore::new(store_dim),
            permissions: PermissionTable::new(),
            adapters,
        }
    }

    /// Stored grants that still name a registered adapter.
    pub fn live_grants(&self, user_id: &str) -> BTreeSet<AdapterId> {
        self.permissions
            .lookup(user_id)
            .into_iter()
            .filter(|id| self.adapters.contains(id))
            .collect()
    }
}

/// On-disk locations of the persisted state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePaths {
    pub store: PathBuf,
    pub adapters_dir: PathBuf,
    pub permissions: PathBuf,
    pub model: PathBuf,
}

impl StatePaths {
    /// Conventional layout under one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            store: dir.join("store.acstore"),
            adapters_dir: dir.join("adapters"),
            permissions: dir.join("permissions.acperm"),
            model: dir.join("model.acmodel"),
        }
    }
}

pub struct Pipeline {
    embedder: Arc<dyn Embedder>,
    state: RwLock<State>,
}

impl Pipeline {
    pub fn new(embedder: Arc<dyn Embedder>, model: ReferenceModel) -> Self {
        let dim = embedder.dim();
        Self {
            embedder,
            state: RwLock::new(State::new(model, dim)),
        }
    }

    pub fn from_state(embedder: Arc<dyn Embedder>, state: State) -> Self {
        Self {
            embedder,
            state: RwLock::new(state),
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Run `f` against a consistent snapshot of the state.
    pub fn read<T>(&self, f: impl FnOnce(&State) -> T) -> T {
        f(&self.state.read())
    }

    /// Apply a mutation; queries see the state strictly before or after it.
    pub fn write<T>(&self, f: impl FnOnce(&mut State) -> T) -> T {
        f(&mut self.state.write())
    }

    pub fn register_adapter(&self, adapter: LowRankAdapter) -> Result<()> {
        self.write(|s| s.adapters.register(adapter))
    }

    /// Unregister the adapter and drop its chunks from the store.
    pub fn remove_adapter(&self, id: &AdapterId) -> Result<usize> {
        self.write(|s| {
            s.adapters.unregister(id)?;
            Ok(s.store.remove_by_tag(id))
        })
    }

    pub fn set_permissions(&self, user_id: &str, grants: BTreeSet<AdapterId>) {
        self.write(|s| s.permissions.set_permissions(user_id, grants))
    }

    /// Chunk, embed and insert a document under `tag`. Returns the chunk count.
    pub fn ingest(&self, doc_id: &str, text: &str, tag: &AdapterId, chunk_size: usize) -> Result<usize> {
        let chunks = chunk_document(doc_id, text, chunk_size.max(1));
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let embeddings = if texts.is_empty() {
            Vec::new()
        } else {
            self.embedder.embed_batch(&texts)?
        };
        self.write(|s| {
            if !s.adapters.contains(tag) {
                return Err(Error::UnknownId(tag.to_string()));
            }
            if s.store.dim() != self.embedder.dim() {
                return Err(Error::UnknownEmbedderDim {
                    embedder: self.embedder.dim(),
                    store: s.store.dim(),
                });
            }
            let n = chunks.len();
            for (chunk, embedding) in chunks.into_iter().zip(embeddings) {
                s.store.insert(EmbeddedChunk {
                    chunk,
                    embedding,
                    adapter_tag: tag.clone(),
                })?;
            }
            Ok(n)
        })
    }

    pub fn ingest_default(&self, doc_id: &str, text: &str, tag: &AdapterId) -> Result<usize> {
        self.ingest(doc_id, text, tag, DEFAULT_CHUNK_SIZE)
    }

    pub fn query(&self, user_id: &str, text: &str, config: &RetrievalConfig) -> Result<QueryOutcome> {
        self.query_received(user_id, text, config, Instant::now())
    }

    /// As [`Pipeline::query`], timing TTFT from `received`.
    pub fn query_received(
        &self,
        user_id: &str,
        text: &str,
        config: &RetrievalConfig,
        received: Instant,
    ) -> Result<QueryOutcome> {
        config.validate()?;
        if text.split_whitespace().next().is_none() {
            return Err(Error::EmptyInput);
        }
        let embed_start = Instant::now();
        let query = self.embedder.embed(text)?;
        let embed_ms = ms(embed_start);

        let retrieve_start = Instant::now();
        let (model, plan, hints) = {
            let state = self.state.read();
            if state.store.dim() != query.dim() {
                return Err(Error::UnknownEmbedderDim {
                    embedder: query.dim(),
                    store: state.store.dim(),
                });
            }
            let grants = state.live_grants(user_id);
            let allowed: HashSet<AdapterId> = grants.iter().cloned().collect();

            let permitted_chunks = top_k(state.store.search(&query, config.fetch_k, Some(&allowed))?, config.k);
            let (permitted, _) = partition(&aggregate_scores(&permitted_chunks), &grants);
            let plan = build_plan(&permitted, config.threshold, &state.adapters)?;

            let hints = if config.hints_enabled {
                let candidate_chunks = top_k(state.store.search(&query, config.fetch_k, None)?, config.k);
                let (_, denied) = partition(&aggregate_scores(&candidate_chunks), &grants);
                denied
                    .iter()
                    .filter(|(_, score)| is_relevant(*score, config.threshold))
                    .filter_map(|(id, score)| {
                        let adapter = state.adapters.get(id)?;
                        adapter.hintable.then(|| Hint {
                            id: id.clone(),
                            score: *score,
                            metadata: adapter.metadata.clone(),
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (state.model.clone(), plan, hints)
        };
        let retrieve_ms = ms(retrieve_start);

        let x = query_features(&query, model.signature().input_dim());
        let response = model.forward_mixed(&x, &plan)?;
        let ttft_ms = ms(received);

        let active = plan.weights();
        Ok(QueryOutcome {
            response: response.to_vec(),
            trace: trace(&active),
            active,
            hints,
            timing: Timing {
                embed_ms,
                retrieve_ms,
                ttft_ms,
            },
        })
    }

    /// Grant `granted` to the user (on top of their current grants) and query again.
    pub fn hint_rerun(
        &self,
        user_id: &str,
        text: &str,
        config: &RetrievalConfig,
        granted: &AdapterId,
    ) -> Result<QueryOutcome> {
        self.write(|s| {
            let mut grants = s.permissions.lookup(user_id);
            grants.insert(granted.clone());
            s.permissions.set_permissions(user_id, grants);
        });
        self.query(user_id, text, config)
    }

    pub fn save(&self, paths: &StatePaths) -> Result<()> {
        let state = self.state.read();
        state.model.save(&paths.model)?;
        state.store.save(&paths.store)?;
        state.permissions.save(&paths.permissions)?;
        sync_adapter_dir(&state.adapters, &paths.adapters_dir)
    }

    pub fn load(embedder: Arc<dyn Embedder>, paths: &StatePaths) -> Result<Self> {
        let model = ReferenceModel::load(&paths.model)?;
        let mut adapters = AdapterRegistry::new(model.signature().clone());
        if paths.adapters_dir.exists() {
            adapters.load_dir(&paths.adapters_dir)?;
        }
        let store = if paths.store.exists() {
            VectorStore::load(&paths.store)?
        } else {
            VectorStore::new(embedder.dim())
        };
        if store.dim() != embedder.dim() {
            return Err(Error::UnknownEmbedderDim {
                embedder: embedder.dim(),
                store: store.dim(),
            });
        }
        let permissions = if paths.permissions.exists() {
            PermissionTable::load(&paths.permissions)?
        } else {
            PermissionTable::new()
        };
        Ok(Self::from_state(
            embedder,
            State {
                model: Arc::new(model),
                store,
                permissions,
                adapters,
            },
        ))
    }
}

/// Write every registered adapter and delete files of unregistered ones.
fn sync_adapter_dir(registry: &AdapterRegistry, dir: &Path) -> Result<()> {
    registry.save_dir(dir)?;
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries.flatten() {
        let path = entry.path();
        let stale = path.extension().is_some_and(|e| e == crate::adapters::ADAPTER_EXTENSION)
            && path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| AdapterId::new(s).ok())
                .is_none_or(|id| !registry.contains(&id) || adapter_path(dir, &id) != path);
        if stale {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn top_k(mut chunks: Vec<ScoredChunk>, k: usize) -> Vec<ScoredChunk> {
    chunks.truncate(k);
    chunks
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn trace(active: &[(AdapterId, f64)]) -> String {
    if active.is_empty() {
        return "base model; no permitted adapter matched".into();
    }
    let parts: Vec<String> = active.iter().map(|(id, w)| format!("{id}={w:.6}")).collect();
    format!("mixed {} adapter(s): {}", active.len(), parts.join(", "))
}
