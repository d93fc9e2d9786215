//! Latency and retrieval benchmarks.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use acmix_core::adapters::AdapterId;
use acmix_core::embedding::HashEmbedder;
use acmix_core::model::{seeded_adapter, ModelSignature, ReferenceModel};
use acmix_core::pipeline::{Pipeline, RetrievalConfig};
use acmix_core::synth::{topic_corpus, topic_pipeline, CorpusShape, Topic};
use acmix_core::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug)]
pub struct LatencyOptions {
    pub min_adapters: usize,
    pub max_adapters: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub width: usize,
    pub rank: usize,
    pub seed: u64,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        Self {
            min_adapters: 1,
            max_adapters: 10,
            repeats: 200,
            warmup: 20,
            width: 256,
            rank: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub adapters: usize,
    pub samples: usize,
    pub median_ttft_ms: f64,
    pub p95_ttft_ms: f64,
}

const PROBE: &str = "latency probe shared by every adapter";

/// Median and p95 TTFT of one fixed query for each active-adapter count.
///
/// Every adapter owns one chunk identical to the query, and the user for
/// count `n` is granted the first `n` adapters, so exactly `n` adapters are
/// mixed. Counts are interleaved within each repeat so drift spreads evenly.
pub fn latency_sweep(opts: &LatencyOptions) -> Result<Vec<LatencyRow>> {
    if opts.min_adapters == 0 || opts.min_adapters > opts.max_adapters || opts.repeats == 0 {
        return Err(Error::InvalidConfig("need 1 <= min <= max adapters and repeats >= 1".into()));
    }
    let w = opts.width;
    let sig = ModelSignature::new(vec![(w, w), (w, w), (w, w)])?;
    let layers: Vec<usize> = (0..sig.layers().len()).collect();
    let pipeline = Pipeline::new(
        Arc::new(HashEmbedder::new(64, opts.seed)?),
        ReferenceModel::seeded(&sig, opts.seed),
    );
    let mut ids = Vec::new();
    for i in 0..opts.max_adapters {
        let id = AdapterId::new(format!("lat{i:04}"))?;
        let seed = opts.seed.wrapping_add(i as u64 + 1);
        pipeline.register_adapter(seeded_adapter(id.clone(), &sig, &layers, opts.rank, opts.rank as f64, 0.05, seed)?)?;
        pipeline.ingest(&format!("probe{i}"), PROBE, &id, PROBE.split_whitespace().count())?;
        ids.push(id);
    }
    let counts: Vec<usize> = (opts.min_adapters..=opts.max_adapters).collect();
    for &n in &counts {
        pipeline.set_permissions(&user(n), ids[..n].iter().cloned().collect::<BTreeSet<_>>());
    }
    let config = RetrievalConfig {
        fetch_k: opts.max_adapters,
        k: opts.max_adapters,
        threshold: 0.0,
        hints_enabled: false,
    };
    let mut samples = vec![Vec::with_capacity(opts.repeats); counts.len()];
    for round in 0..opts.warmup + opts.repeats {
        for (slot, &n) in counts.iter().enumerate() {
            let outcome = pipeline.query(&user(n), PROBE, &config)?;
            debug_assert_eq!(outcome.active.len(), n);
            if round >= opts.warmup {
                samples[slot].push(outcome.timing.ttft_ms);
            }
        }
    }
    Ok(counts
        .iter()
        .zip(samples)
        .map(|(&adapters, mut s)| {
            s.sort_by(f64::total_cmp);
            LatencyRow {
                adapters,
                samples: s.len(),
                median_ttft_ms: median(&s),
                p95_ttft_ms: percentile(&s, 0.95),
            }
        })
        .collect())
}

fn user(n: usize) -> String {
    format!("bench-{n}")
}

/// Median of sorted values.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalRow {
    pub topic: String,
    pub queries: usize,
    pub hits: usize,
    pub fraction: f64,
    pub mean_adapters: f64,
}

/// For each topic, how often its adapter is among the active adapters of a
/// user granted everything, and how many adapters were active on average.
/// The adapter for a topic is the one whose id equals the topic name.
pub fn retrieval_accuracy(pipeline: &Pipeline, topics: &[Topic], config: &RetrievalConfig) -> Result<Vec<RetrievalRow>> {
    let everyone = "bench-all";
    pipeline.set_permissions(everyone, pipeline.read(|s| s.adapters.ids().into_iter().collect()));
    let mut rows = Vec::with_capacity(topics.len() + 1);
    let (mut all_queries, mut all_hits, mut all_active) = (0, 0, 0);
    for topic in topics {
        let target = AdapterId::new(topic.name.as_str())?;
        let (mut hits, mut active) = (0, 0);
        for q in &topic.queries {
            let outcome = pipeline.query(everyone, q, config)?;
            hits += usize::from(outcome.active.iter().any(|(id, _)| *id == target));
            active += outcome.active.len();
        }
        rows.push(row(&topic.name, topic.queries.len(), hits, active));
        all_queries += topic.queries.len();
        all_hits += hits;
        all_active += active;
    }
    rows.push(row("all", all_queries, all_hits, all_active));
    Ok(rows)
}

fn row(topic: &str, queries: usize, hits: usize, active: usize) -> RetrievalRow {
    let per = |v: usize| if queries == 0 { 0.0 } else { v as f64 / queries as f64 };
    RetrievalRow {
        topic: topic.to_owned(),
        queries,
        hits,
        fraction: per(hits),
        mean_adapters: per(active),
    }
}

pub const RETRIEVAL_EMBED_DIM: usize = 256;

fn retrieval_signature() -> ModelSignature {
    ModelSignature::new(vec![(32, 32), (32, 8)]).expect("valid signature")
}

/// The default synthetic corpus: bucket-disjoint topic vocabularies.
pub fn synthetic_topics(seed: u64) -> Result<(HashEmbedder, Vec<Topic>)> {
    let embedder = HashEmbedder::new(RETRIEVAL_EMBED_DIM, seed)?;
    let topics = topic_corpus(&embedder, CorpusShape::default(), seed);
    Ok((embedder, topics))
}

pub fn retrieval_pipeline(embedder: HashEmbedder, topics: &[Topic], seed: u64) -> Result<Pipeline> {
    topic_pipeline(embedder, topics, &retrieval_signature(), 4, acmix_core::embedding::DEFAULT_CHUNK_SIZE, seed)
}

/// Read topics from `<dir>/<topic>/`: every `*.txt` file except
/// `queries.txt` is a document; `queries.txt` holds one query per line.
pub fn load_topic_dir(dir: &Path) -> Result<Vec<Topic>> {
    let mut topics = Vec::new();
    for topic_dir in sorted_entries(dir)? {
        if !topic_dir.is_dir() {
            continue;
        }
        let name = topic_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidConfig(format!("bad topic dir {}", topic_dir.display())))?
            .to_owned();
        let mut documents = Vec::new();
        let mut queries = Vec::new();
        for file in sorted_entries(&topic_dir)? {
            if file.extension().is_none_or(|e| e != "txt") {
                continue;
            }
            let text = std::fs::read_to_string(&file).map_err(|e| Error::Io {
                path: file.clone(),
                source: e,
            })?;
            if file.file_name().is_some_and(|n| n == "queries.txt") {
                queries.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned));
            } else {
                documents.push(text);
            }
        }
        topics.push(Topic {
            name,
            vocabulary: Vec::new(),
            documents,
            queries,
        });
    }
    Ok(topics)
}

pub(crate) fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })?;
    let mut paths: Vec<_> = read.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    Ok(paths)
}

/// Write serializable rows as CSV with a header row.
pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
