//! Service configuration: one JSON document, located by `--config`, then
//! `AC_CONFIG`, else built-in defaults.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use acmix_core::embedding::{Embedder, HashEmbedder, RemoteEmbedder, DEFAULT_CHUNK_SIZE, DEFAULT_HASH_DIM};
use acmix_core::model::{ModelSignature, ReferenceModel};
use acmix_core::pipeline::{Pipeline, RetrievalConfig, StatePaths};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "AC_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash { dim: usize, seed: u64 },
    Remote { url: String, dim: usize },
}

impl EmbedderConfig {
    pub fn dim(&self) -> usize {
        match self {
            Self::Hash { dim, .. } | Self::Remote { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> acmix_core::Result<Arc<dyn Embedder>> {
        Ok(match self {
            Self::Hash { dim, seed } => Arc::new(HashEmbedder::new(*dim, *seed)?),
            Self::Remote { url, dim } => Arc::new(RemoteEmbedder::new(url, *dim)),
        })
    }
}

/// Model created on first start when `model_path` does not exist yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInit {
    pub signature: ModelSignature,
    pub seed: u64,
}

impl Default for ModelInit {
    fn default() -> Self {
        Self {
            signature: ModelSignature::new(vec![(64, 64), (64, 64), (64, 16)]).expect("valid default signature"),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub store_path: PathBuf,
    pub adapters_dir: PathBuf,
    pub permissions_path: PathBuf,
    pub model_path: PathBuf,
    pub embedder: EmbedderConfig,
    pub retrieval: RetrievalConfig,
    pub chunk_size: usize,
    pub metrics_enabled: bool,
    /// Admin endpoints answer 401 to everyone while this is unset.
    pub admin_token: Option<String>,
    pub console_dir: Option<PathBuf>,
    pub model_init: ModelInit,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let paths = StatePaths::in_dir(Path::new("data"));
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8077)),
            store_path: paths.store,
            adapters_dir: paths.adapters_dir,
            permissions_path: paths.permissions,
            model_path: paths.model,
            embedder: EmbedderConfig::Hash {
                dim: DEFAULT_HASH_DIM,
                seed: 0,
            },
            retrieval: RetrievalConfig::default(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            metrics_enabled: true,
            admin_token: None,
            console_dir: None,
            model_init: ModelInit::default(),
        }
    }
}

impl ServiceConfig {
    /// Load from `explicit`, else from `$AC_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let config = match explicit.map(Path::to_path_buf).or(from_env) {
            Some(path) => Self::from_file(&path)?,
            None => Self::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.retrieval
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.chunk_size == 0 {
            return Err(ConfigError::Invalid("chunk_size must be positive".into()));
        }
        if self.embedder.dim() == 0 {
            return Err(ConfigError::Invalid("embedder dim must be positive".into()));
        }
        Ok(())
    }

    /// Keep all state files under `dir` using the conventional names.
    pub fn with_data_dir(mut self, dir: &Path) -> Self {
        let paths = StatePaths::in_dir(dir);
        self.store_path = paths.store;
        self.adapters_dir = paths.adapters_dir;
        self.permissions_path = paths.permissions;
        self.model_path = paths.model;
        self
    }

    pub fn paths(&self) -> StatePaths {
        StatePaths {
            store: self.store_path.clone(),
            adapters_dir: self.adapters_dir.clone(),
            permissions: self.permissions_path.clone(),
            model: self.model_path.clone(),
        }
    }

    /// Load the persisted state, or create and persist a fresh one when no
    /// model file exists yet.
    pub fn open_pipeline(&self) -> acmix_core::Result<Pipeline> {
        let embedder = self.embedder.build()?;
        let paths = self.paths();
        if paths.model.exists() {
            return Pipeline::load(embedder, &paths);
        }
        let model = ReferenceModel::seeded(&self.model_init.signature, self.model_init.seed);
        let pipeline = Pipeline::new(embedder, model);
        pipeline.save(&paths)?;
        Ok(pipeline)
    }
}
