//! Command-line verbs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use acmix_core::adapters::{AdapterId, LowRankAdapter};
use acmix_core::audit::{audit_corpus, TextEntry, TrainingCorpus, DEFAULT_N_VALUES};
use acmix_core::pipeline::RetrievalConfig;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::api::QueryResponse;
use crate::bench::{self, LatencyOptions};
use crate::config::{ConfigError, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "acmix", version, about = "Permission-aware adapter retrieval and mixing")]
pub struct Cli {
    /// Config file (default: $AC_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Keep all state files under this directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<SocketAddr>,
        #[arg(long)]
        admin_token: Option<String>,
        #[arg(long)]
        console_dir: Option<PathBuf>,
        #[arg(long)]
        no_metrics: bool,
    },
    /// Chunk, embed and store every file in a directory under one adapter.
    Ingest {
        dir: PathBuf,
        #[arg(long)]
        tag: String,
        /// Register this adapter file first.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        chunk_size: Option<usize>,
    },
    /// Run one query against the persisted state and print the JSON outcome.
    Query {
        #[arg(long)]
        user: String,
        #[arg(long)]
        text: String,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Verbatim-overlap audit of predictions against training texts.
    Audit {
        /// File, directory of files, or .jsonl of {"id","text"} records.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_N_VALUES.to_vec())]
        n: Vec<usize>,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full JSON reports.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// TTFT per active-adapter count.
    Latency {
        /// `N` or `LO..HI` (inclusive).
        #[arg(long, default_value = "1..10")]
        adapters: AdapterRange,
        #[arg(long, default_value_t = 200)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-topic fraction of queries whose adapter is retrieved.
    Retrieval {
        /// Directory of `<topic>/*.txt` documents plus `<topic>/queries.txt`
        /// (default: synthetic topics).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fetch_k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub no_hints: bool,
}

impl RetrievalArgs {
    fn apply(&self, base: &RetrievalConfig) -> RetrievalConfig {
        RetrievalConfig {
            fetch_k: self.fetch_k.unwrap_or(base.fetch_k),
            k: self.k.unwrap_or(base.k),
            threshold: self.threshold.unwrap_or(base.threshold),
            hints_enabled: base.hints_enabled && !self.no_hints,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterRange {
    pub lo: usize,
    pub hi: usize,
}

impl FromStr for AdapterRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad adapter count {t:?}: {e}"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
            None => (1, num(s)?),
        };
        if lo == 0 || lo > hi {
            return Err(format!("adapter range {s:?} must satisfy 1 <= lo <= hi"));
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<acmix_core::Error> for CliError {
    fn from(e: acmix_core::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, CliError> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.data_dir {
        config = config.with_data_dir(dir);
    }
    Ok(config)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Serve {
            listen,
            admin_token,
            console_dir,
            no_metrics,
        } => {
            let mut config = load_config(&cli)?;
            config.listen = listen.unwrap_or(config.listen);
            config.admin_token = admin_token.clone().or(config.admin_token);
            config.console_dir = console_dir.clone().or(config.console_dir);
            config.metrics_enabled &= !no_metrics;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime
                .block_on(crate::serve(config))
                .map_err(|e| CliError::Runtime(e.to_string()))
        }
        Command::Ingest {
            dir,
            tag,
            adapter,
            chunk_size,
        } => {
            let config = load_config(&cli)?;
            let tag = AdapterId::new(tag.as_str()).map_err(|e| CliError::Usage(e.to_string()))?;
            let chunk_size = chunk_size.unwrap_or(config.chunk_size);
            if chunk_size == 0 {
                return Err(CliError::Usage("--chunk-size must be positive".into()));
            }
            let pipeline = config.open_pipeline()?;
            if let Some(path) = adapter {
                let a = LowRankAdapter::load(path)?;
                if a.id() != &tag {
                    return Err(CliError::Usage(format!("adapter file holds {}, not {tag}", a.id())));
                }
                pipeline.register_adapter(a)?;
            }
            let (mut docs, mut chunks) = (0, 0);
            for file in bench::sorted_entries(dir)? {
                if !file.is_file() {
                    continue;
                }
                let text = std::fs::read_to_string(&file).map_err(|e| CliError::Runtime(format!("{}: {e}", file.display())))?;
                chunks += pipeline.ingest(&doc_id(&file), &text, &tag, chunk_size)?;
                docs += 1;
            }
            pipeline.save(&config.paths())?;
            println!("ingested {docs} documents as {chunks} chunks under {tag}");
            Ok(())
        }
        Command::Query { user, text, retrieval } => {
            let config = load_config(&cli)?;
            let rc = retrieval.apply(&config.retrieval);
            rc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let pipeline = config.open_pipeline()?;
            let outcome = pipeline.query(user, text, &rc)?;
            println!("{}", serde_json::to_string_pretty(&QueryResponse::from(outcome))?);
            Ok(())
        }
        Command::Bench(BenchCommand::Latency {
            adapters,
            repeats,
            seed,
            out,
        }) => {
            let rows = bench::latency_sweep(&LatencyOptions {
                min_adapters: adapters.lo,
                max_adapters: adapters.hi,
                repeats: *repeats,
                seed: *seed,
                ..LatencyOptions::default()
            })
            .map_err(|e| CliError::Usage(e.to_string()))?;
            bench::write_csv(sink(out.as_deref())?, &rows)?;
            Ok(())
        }
        Command::Bench(BenchCommand::Retrieval {
            corpus,
            retrieval,
            seed,
            out,
        }) => {
            let rc = retrieval.apply(&RetrievalConfig::default());
            rc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let (embedder, topics) = bench::synthetic_topics(*seed)?;
            let topics = match corpus {
                Some(dir) => bench::load_topic_dir(dir)?,
                None => topics,
            };
            let pipeline = bench::retrieval_pipeline(embedder, &topics, *seed)?;
            let rows = bench::retrieval_accuracy(&pipeline, &topics, &rc)?;
            bench::write_csv(sink(out.as_deref())?, &rows)?;
            Ok(())
        }
        Command::Audit {
            pred,
            train,
            n,
            out,
            json,
        } => {
            if n.is_empty() || n.contains(&0) {
                return Err(CliError::Usage("--n values must be positive".into()));
            }
            let predictions = read_entries(pred)?;
            let training = read_entries(train)?;
            let corpus = TrainingCorpus::from_texts(training.iter().map(|t| t.text.as_str()));
            let reports = audit_corpus(&predictions, &corpus, n)?;
            let rows: Vec<AuditRow> = reports
                .iter()
                .map(|r| AuditRow {
                    prediction_id: r.prediction_id.clone(),
                    n: r.n,
                    absolute: r.absolute,
                    relative: r.relative,
                    interval_count: r.global_intervals.len(),
                })
                .collect();
            bench::write_csv(sink(out.as_deref())?, &rows)?;
            if let Some(path) = json {
                let mut w = sink(Some(path))?;
                serde_json::to_writer_pretty(&mut w, &reports)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct AuditRow {
    prediction_id: String,
    n: usize,
    absolute: usize,
    relative: f64,
    interval_count: usize,
}

fn doc_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// A directory yields one entry per file; `.jsonl` one per line; any other
/// file is a single entry named after its stem.
pub fn read_entries(path: &Path) -> Result<Vec<TextEntry>, CliError> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())));
    if path.is_dir() {
        return bench::sorted_entries(path)?
            .into_iter()
            .filter(|p| p.is_file())
            .map(|p| {
                Ok(TextEntry {
                    id: doc_id(&p),
                    text: read(&p)?,
                })
            })
            .collect();
    }
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        return text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))))
            .collect();
    }
    Ok(vec![TextEntry { id: doc_id(path), text }])
}
