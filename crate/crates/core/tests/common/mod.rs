//! Randomized pipeline worlds and a brute-force retrieval oracle shared by
//! integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use acmix_core::adapters::AdapterId;
use acmix_core::audit::{CommonSubstring, WordInterval};
use acmix_core::embedding::{chunk_document, Embedder, EmbeddingVector, HashEmbedder};
use acmix_core::model::{seeded_adapter, ModelSignature, ReferenceModel, XorShift64Star};
use acmix_core::pipeline::{Pipeline, RetrievalConfig};

/// Every ingested chunk in insertion order, scored by direct summation.
#[derive(Default)]
pub struct Oracle {
    rows: Vec<(AdapterId, Vec<f64>)>,
}

impl Oracle {
    pub fn record(&mut self, tag: &AdapterId, embedding: &EmbeddingVector) {
        // the store keeps f32 precision
        let values = embedding.values().iter().map(|&v| v as f32 as f64).collect();
        self.rows.push((tag.clone(), values));
    }

    pub fn forget(&mut self, tag: &AdapterId) {
        self.rows.retain(|(t, _)| t != tag);
    }

    /// `(tag, score)` of the best `k` chunks, ties to the earlier insertion.
    pub fn top_k(&self, q: &EmbeddingVector, k: usize, allowed: Option<&BTreeSet<AdapterId>>) -> Vec<(AdapterId, f64)> {
        let mut scored: Vec<(AdapterId, f64)> = self
            .rows
            .iter()
            .filter(|(t, _)| allowed.is_none_or(|a| a.contains(t)))
            .map(|(t, v)| {
                let mut s = 0.0;
                for (a, b) in q.values().iter().zip(v) {
                    s += a * b;
                }
                (t.clone(), s.clamp(-1.0, 1.0))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        scored.truncate(k);
        scored
    }

    pub fn means(chunks: &[(AdapterId, f64)]) -> BTreeMap<AdapterId, f64> {
        let mut acc: BTreeMap<AdapterId, (f64, usize)> = BTreeMap::new();
        for (t, s) in chunks {
            let e = acc.entry(t.clone()).or_default();
            e.0 += s;
            e.1 += 1;
        }
        acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
    }

    /// Expected active weights (by id) and hint ids for a query.
    pub fn expected(
        &self,
        q: &EmbeddingVector,
        cfg: &RetrievalConfig,
        grants: &BTreeSet<AdapterId>,
        hintable: &BTreeSet<AdapterId>,
    ) -> (BTreeMap<AdapterId, f64>, BTreeSet<AdapterId>) {
        let relevant = |s: f64| s > 0.0 && s >= cfg.threshold;
        let permitted = Self::means(&self.top_k(q, cfg.k, Some(grants)));
        let kept: Vec<_> = permitted.into_iter().filter(|(_, s)| relevant(*s)).collect();
        let total: f64 = kept.iter().map(|(_, s)| s).sum();
        let active = kept.into_iter().map(|(t, s)| (t, s / total)).collect();
        let hints = if cfg.hints_enabled {
            Self::means(&self.top_k(q, cfg.k, None))
                .into_iter()
                .filter(|(t, s)| relevant(*s) && !grants.contains(t) && hintable.contains(t))
                .map(|(t, _)| t)
                .collect()
        } else {
            BTreeSet::new()
        };
        (active, hints)
    }
}

pub struct World {
    pub pipeline: Pipeline,
    pub oracle: Oracle,
    pub ids: Vec<AdapterId>,
    pub hintable: BTreeSet<AdapterId>,
    pub vocabulary: Vec<String>,
    pub embedder: HashEmbedder,
    pub rng: XorShift64Star,
}

pub const WORLD_CHUNK: usize = 6;

impl World {
    /// `n` adapters over a shared vocabulary, each with a few short documents
    /// drawn from its own random slice of words.
    pub fn random(seed: u64, n: usize) -> World {
        let mut rng = XorShift64Star::new(seed);
        let embedder = HashEmbedder::new(64, seed).unwrap();
        let sig = ModelSignature::new(vec![(8, 12), (12, 12), (12, 4)]).unwrap();
        let pipeline = Pipeline::new(Arc::new(embedder.clone()), ReferenceModel::seeded(&sig, seed));
        let vocabulary: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let mut oracle = Oracle::default();
        let mut ids = Vec::new();
        let mut hintable = BTreeSet::new();
        for a in 0..n {
            let id = AdapterId::new(format!("zone{a}")).unwrap();
            let layers: Vec<usize> = (0..3).filter(|_| rng.next_f64() < 0.7).collect();
            let layers = if layers.is_empty() { vec![1] } else { layers };
            let rank = 1 + (rng.next_u64() % 3) as usize;
            let hint = rng.next_f64() < 0.7;
            let adapter = seeded_adapter(id.clone(), &sig, &layers, rank, 1.0 + rng.next_f64() * 8.0, 0.3, rng.next_u64())
                .unwrap()
                .with_hintable(hint)
                .with_metadata("description", format!("zone {a}"));
            if hint {
                hintable.insert(id.clone());
            }
            pipeline.register_adapter(adapter).unwrap();
            let lo = (rng.next_u64() % 30) as usize;
            for d in 0..1 + rng.next_u64() % 3 {
                let len = 3 + (rng.next_u64() % 15) as usize;
                let text: Vec<&str> = (0..len)
                    .map(|_| vocabulary[lo + (rng.next_u64() % 10) as usize].as_str())
                    .collect();
                let text = text.join(" ");
                let doc = format!("doc{a}-{d}");
                pipeline.ingest(&doc, &text, &id, WORLD_CHUNK).unwrap();
                for chunk in chunk_document(&doc, &text, WORLD_CHUNK) {
                    oracle.record(&id, &embedder.embed(&chunk.text).unwrap());
                }
            }
            ids.push(id);
        }
        World {
            pipeline,
            oracle,
            ids,
            hintable,
            vocabulary,
            embedder,
            rng,
        }
    }

    pub fn random_query(&mut self) -> String {
        let len = 1 + (self.rng.next_u64() % 6) as usize;
        (0..len)
            .map(|_| self.vocabulary[(self.rng.next_u64() % self.vocabulary.len() as u64) as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn random_grants(&mut self) -> BTreeSet<AdapterId> {
        self.ids
            .iter()
            .filter(|_| self.rng.next_f64() < 0.5)
            .cloned()
            .collect()
    }

    pub fn random_config(&mut self) -> RetrievalConfig {
        let fetch_k = 1 + (self.rng.next_u64() % 12) as usize;
        RetrievalConfig {
            fetch_k,
            k: 1 + (self.rng.next_u64() % fetch_k as u64) as usize,
            threshold: if self.rng.next_f64() < 0.5 { 0.0 } else { self.rng.next_f64() * 0.6 },
            hints_enabled: self.rng.next_f64() < 0.8,
        }
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// All left- and right-maximal common runs of at least `n` words, found with
/// an O(|p|·|s|) table of run lengths.
pub fn naive_common_substrings(p: &[String], s: &[String], n: usize) -> Vec<CommonSubstring> {
    let (m, k) = (p.len(), s.len());
    let mut run = vec![vec![0usize; k + 1]; m + 1];
    for i in (0..m).rev() {
        for j in (0..k).rev() {
            if p[i] == s[j] {
                run[i][j] = run[i + 1][j + 1] + 1;
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..k {
            let len = run[i][j];
            if len >= n && len > 0 && (i == 0 || j == 0 || p[i - 1] != s[j - 1]) {
                out.push(CommonSubstring {
                    prediction: WordInterval::new(i, i + len - 1),
                    training: WordInterval::new(j, j + len - 1),
                });
            }
        }
    }
    out
}

/// Random word sequence over an alphabet of `alphabet` distinct words.
pub fn random_words(rng: &mut XorShift64Star, len: usize, alphabet: usize) -> Vec<String> {
    (0..len).map(|_| format!("t{}", rng.next_u64() % alphabet as u64)).collect()
}
