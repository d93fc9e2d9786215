//! Synthetic topic corpora for retrieval experiments.
//!
//! Each topic gets its own vocabulary whose words land in hash buckets no
//! other topic uses, so with the hash embedder a pure-topic query has zero
//! similarity to every other topic's chunks.

use std::collections::HashSet;
use std::sync::Arc;

use crate::adapters::AdapterId;
use crate::embedding::{Embedder, HashEmbedder};
use crate::error::Result;
use crate::model::{seeded_adapter, ModelSignature, ReferenceModel, XorShift64Star};
use crate::pipeline::Pipeline;

#[derive(Clone, Debug)]
pub struct Topic {
    pub name: String,
    pub vocabulary: Vec<String>,
    pub documents: Vec<String>,
    /// Held out: never ingested.
    pub queries: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusShape {
    pub topics: usize,
    pub words_per_topic: usize,
    pub documents_per_topic: usize,
    pub document_words: usize,
    pub queries_per_topic: usize,
    pub query_words: usize,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            topics: 5,
            words_per_topic: 24,
            documents_per_topic: 4,
            document_words: 250,
            queries_per_topic: 50,
            query_words: 8,
        }
    }
}

/// Generate topics with pairwise bucket-disjoint vocabularies.
///
/// # Panics
///
/// If the embedder has too few buckets for `topics × words_per_topic` words.
pub fn topic_corpus(embedder: &HashEmbedder, shape: CorpusShape, seed: u64) -> Vec<Topic> {
    assert!(
        shape.topics * shape.words_per_topic <= embedder.dim(),
        "not enough hash buckets for a collision-free vocabulary"
    );
    let mut used = HashSet::new();
    let mut rng = XorShift64Star::new(seed);
    let mut candidate = 0usize;
    (0..shape.topics)
        .map(|t| {
            let name = format!("topic{t}");
            let mut vocabulary = Vec::with_capacity(shape.words_per_topic);
            while vocabulary.len() < shape.words_per_topic {
                let word = format!("{name}_{candidate}");
                candidate += 1;
                if used.insert(embedder.bucket(&word)) {
                    vocabulary.push(word);
                }
            }
            let mut sample = |len: usize| -> String {
                (0..len)
                    .map(|_| vocabulary[(rng.next_u64() % vocabulary.len() as u64) as usize].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let documents = (0..shape.documents_per_topic).map(|_| sample(shape.document_words)).collect();
            let queries = (0..shape.queries_per_topic).map(|_| sample(shape.query_words)).collect();
            Topic {
                name,
                vocabulary,
                documents,
                queries,
            }
        })
        .collect()
}

/// A pipeline with one adapter per topic (id = topic name, adapting every
/// layer at rank `rank`) and every topic document ingested under it.
pub fn topic_pipeline(
    embedder: HashEmbedder,
    topics: &[Topic],
    signature: &ModelSignature,
    rank: usize,
    chunk_size: usize,
    seed: u64,
) -> Result<Pipeline> {
    let pipeline = Pipeline::new(Arc::new(embedder), ReferenceModel::seeded(signature, seed));
    let layers: Vec<usize> = (0..signature.layers().len()).collect();
    for (i, topic) in topics.iter().enumerate() {
        let id = AdapterId::new(topic.name.as_str())?;
        let adapter = seeded_adapter(id.clone(), signature, &layers, rank, 2.0 * rank as f64, 0.1, seed ^ (i as u64 + 1))?
            .with_metadata("description", format!("knowledge about {}", topic.name));
        pipeline.register_adapter(adapter)?;
        for (d, doc) in topic.documents.iter().enumerate() {
            pipeline.ingest(&format!("{}-{d}", topic.name), doc, &id, chunk_size)?;
        }
    }
    Ok(pipeline)
}
