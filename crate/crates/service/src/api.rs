//! The `/v1` HTTP surface.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Instant;

use acmix_core::adapters::{AdapterId, LowRankAdapter};
use acmix_core::audit::{OverlapReport, TrainingCorpus};
use acmix_core::embedding::TokenSequence;
use acmix_core::pipeline::{Pipeline, QueryOutcome, RetrievalConfig};
use acmix_core::Error;
use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Extension, Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::metrics::{Counter, Metrics, MetricsSnapshot};

pub const ADMIN_TOKEN_HEADER: &str = "x-admin-token";

pub struct AppState {
    pipeline: Arc<Pipeline>,
    config: ServiceConfig,
    metrics: Metrics,
    // serializes mutate-then-persist so files follow mutation order
    persist: Mutex<()>,
}

impl AppState {
    pub fn new(config: ServiceConfig, pipeline: Pipeline) -> Arc<Self> {
        Arc::new(Self {
            pipeline: Arc::new(pipeline),
            metrics: Metrics::new(config.metrics_enabled),
            config,
            persist: Mutex::new(()),
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    /// Apply `f` and persist the resulting state.
    fn mutate<T>(&self, f: impl FnOnce(&Pipeline) -> acmix_core::Result<T>) -> Result<T, ApiError> {
        let _guard = self.persist.lock();
        let out = f(&self.pipeline)?;
        self.pipeline.save(&self.config.paths())?;
        self.metrics.incr(Counter::AdminMutation);
        Ok(out)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptyInput
            | Error::EmptyPrediction
            | Error::DegenerateVector
            | Error::DimensionMismatch { .. }
            | Error::FormatVersionMismatch { .. }
            | Error::CorruptFile(_)
            | Error::InvalidAdapterId(_)
            | Error::ShapeMismatch(_)
            | Error::LayerNotAdapted { .. }
            | Error::InvalidPlan(_) => StatusCode::BAD_REQUEST,
            Error::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::UnknownId(_) => StatusCode::NOT_FOUND,
            Error::DuplicateId(_) => StatusCode::CONFLICT,
            Error::Remote(_) => StatusCode::BAD_GATEWAY,
            Error::UnknownEmbedderDim { .. } | Error::Io { .. } | Error::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Arrival time of the request, stamped before body extraction.
#[derive(Clone, Copy, Debug)]
struct Received(Instant);

async fn stamp(mut req: Request, next: Next) -> Response {
    req.extensions_mut().insert(Received(Instant::now()));
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let admin = Router::new()
        .route("/adapters", post(add_adapter).get(list_adapters))
        .route("/adapters/{id}", delete(remove_adapter))
        .route("/adapters/{id}/documents", post(add_documents))
        .route("/permissions", get(list_permissions))
        .route("/permissions/{user_id}", put(set_permissions))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_admin));
    let mut app = Router::new()
        .route("/v1/query", post(query))
        .route("/v1/audit/memorization", post(audit))
        .route("/v1/metrics", get(metrics))
        .nest("/v1/admin", admin);
    if let Some(dir) = &state.config.console_dir {
        app = app.nest_service("/console", ServeDir::new(dir));
    }
    app.layer(middleware::from_fn(stamp)).with_state(state)
}

// ---- query ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub user_id: String,
    pub query: String,
    pub k: Option<usize>,
    pub fetch_k: Option<usize>,
    pub threshold: Option<f64>,
    pub hints_enabled: Option<bool>,
}

impl QueryRequest {
    pub fn config(&self, defaults: &RetrievalConfig) -> RetrievalConfig {
        RetrievalConfig {
            fetch_k: self.fetch_k.unwrap_or(defaults.fetch_k),
            k: self.k.unwrap_or(defaults.k),
            threshold: self.threshold.unwrap_or(defaults.threshold),
            hints_enabled: self.hints_enabled.unwrap_or(defaults.hints_enabled),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveEntry {
    pub id: AdapterId,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HintEntry {
    pub id: AdapterId,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub response: Vec<f64>,
    pub active: Vec<ActiveEntry>,
    pub hints: Vec<HintEntry>,
    pub timing: acmix_core::pipeline::Timing,
}

impl From<QueryOutcome> for QueryResponse {
    fn from(o: QueryOutcome) -> Self {
        Self {
            response: o.response,
            active: o.active.into_iter().map(|(id, weight)| ActiveEntry { id, weight }).collect(),
            hints: o
                .hints
                .into_iter()
                .map(|h| HintEntry {
                    id: h.id,
                    metadata: h.metadata,
                })
                .collect(),
            timing: o.timing,
        }
    }
}

async fn query(
    State(state): State<Arc<AppState>>,
    Extension(Received(received)): Extension<Received>,
    body: Bytes,
) -> ApiResult<Json<QueryResponse>> {
    state.metrics.incr(Counter::Query);
    let result = async {
        let req: QueryRequest = parse(&body)?;
        if req.query.trim().is_empty() {
            return Err(ApiError::from(Error::EmptyInput));
        }
        let config = req.config(&state.config.retrieval);
        let st = state.clone();
        let outcome = blocking(move || {
            st.pipeline
                .query_received(&req.user_id, &req.query, &config, received)
                .map_err(ApiError::from)
        })
        .await?;
        state.metrics.observe_ttft(outcome.active.len(), outcome.timing.ttft_ms);
        Ok(Json(QueryResponse::from(outcome)))
    }
    .await;
    if result.is_err() {
        state.metrics.incr(Counter::QueryError);
    }
    result
}

// ---- audit ----

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum TrainingText {
    Plain(String),
    Entry { id: String, text: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRequest {
    pub prediction: String,
    #[serde(default)]
    pub prediction_id: Option<String>,
    pub n: usize,
    /// Ingested document ids to audit against.
    #[serde(default)]
    pub training_ids: Option<Vec<String>>,
    /// Inline training texts.
    #[serde(default)]
    pub training: Option<Vec<TrainingText>>,
}

async fn audit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<OverlapReport>> {
    let req: AuditRequest = parse(&body)?;
    state.metrics.incr(Counter::Audit);
    let st = state.clone();
    blocking(move || {
        let prediction = TokenSequence::tokenize(&req.prediction);
        if prediction.is_empty() {
            return Err(Error::EmptyPrediction.into());
        }
        let mut texts: Vec<String> = req
            .training
            .unwrap_or_default()
            .into_iter()
            .map(|t| match t {
                TrainingText::Plain(text) | TrainingText::Entry { text, .. } => text,
            })
            .collect();
        let inline_only = req.training_ids.is_none() && !texts.is_empty();
        if !inline_only {
            let docs = st.pipeline.read(|s| s.store.documents());
            match &req.training_ids {
                Some(ids) => {
                    let known: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
                    if let Some(missing) = ids.iter().find(|id| !known.contains(id.as_str())) {
                        return Err(Error::UnknownId(missing.clone()).into());
                    }
                    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
                    texts.extend(docs.into_iter().filter(|d| wanted.contains(d.doc_id.as_str())).map(|d| d.text));
                }
                None => texts.extend(docs.into_iter().map(|d| d.text)),
            }
        }
        let corpus = TrainingCorpus::from_texts(texts.iter().map(String::as_str));
        let id = req.prediction_id.unwrap_or_else(|| "prediction".into());
        Ok(Json(corpus.score(&id, &prediction, req.n)?))
    })
    .await
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<MetricsSnapshot> {
    Json(state.metrics.snapshot())
}

// ---- admin ----

fn same_secret(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn require_admin(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let presented = req.headers().get(ADMIN_TOKEN_HEADER).map(|v| v.as_bytes());
    let ok = match (&state.config.admin_token, presented) {
        (Some(expected), Some(given)) => same_secret(expected.as_bytes(), given),
        _ => false,
    };
    if !ok {
        state.metrics.incr(Counter::AdminRejection);
        return ApiError::new(StatusCode::UNAUTHORIZED, "missing or bad admin token").into_response();
    }
    next.run(req).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentUpload {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterUpload {
    /// Server-side path of an `.acadapter` file.
    pub path: std::path::PathBuf,
    #[serde(default)]
    pub documents: Vec<DocumentUpload>,
    #[serde(default)]
    pub chunk_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentsUpload {
    pub documents: Vec<DocumentUpload>,
    #[serde(default)]
    pub chunk_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSummary {
    pub id: AdapterId,
    pub rank: usize,
    pub alpha: f64,
    pub hintable: bool,
    pub metadata: BTreeMap<String, String>,
    pub chunks: usize,
}

fn ingest_all(p: &Pipeline, id: &AdapterId, docs: &[DocumentUpload], chunk_size: usize) -> acmix_core::Result<usize> {
    docs.iter().try_fold(0, |n, d| Ok(n + p.ingest(&d.doc_id, &d.text, id, chunk_size)?))
}

async fn add_adapter(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let raw = headers
        .get(header::CONTENT_TYPE)
        .is_some_and(|v| v.as_bytes().starts_with(b"application/octet-stream"));
    let (adapter, docs, chunk_size) = if raw {
        (LowRankAdapter::from_bytes(&body)?, Vec::new(), None)
    } else {
        let upload: AdapterUpload = parse(&body)?;
        (LowRankAdapter::load(&upload.path)?, upload.documents, upload.chunk_size)
    };
    let chunk_size = positive_chunk_size(chunk_size, &state)?;
    let st = state.clone();
    let (id, chunks) = blocking(move || {
        st.mutate(|p| {
            let id = adapter.id().clone();
            p.register_adapter(adapter)?;
            match ingest_all(p, &id, &docs, chunk_size) {
                Ok(chunks) => Ok((id, chunks)),
                Err(e) => {
                    p.remove_adapter(&id)?;
                    Err(e)
                }
            }
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "chunks": chunks })))
        .into_response())
}

fn positive_chunk_size(requested: Option<usize>, state: &AppState) -> ApiResult<usize> {
    match requested {
        Some(0) => Err(Error::InvalidConfig("chunk_size must be positive".into()).into()),
        Some(n) => Ok(n),
        None => Ok(state.config.chunk_size),
    }
}

fn adapter_id(raw: &str) -> ApiResult<AdapterId> {
    Ok(AdapterId::new(raw)?)
}

async fn add_documents(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let id = adapter_id(&id)?;
    let upload: DocumentsUpload = parse(&body)?;
    let chunk_size = positive_chunk_size(upload.chunk_size, &state)?;
    let st = state.clone();
    let chunks = blocking(move || st.mutate(|p| ingest_all(p, &id, &upload.documents, chunk_size))).await?;
    Ok(Json(json!({ "chunks": chunks })))
}

async fn remove_adapter(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let id = adapter_id(&id)?;
    let st = state.clone();
    let removed = blocking(move || st.mutate(|p| p.remove_adapter(&id).map(|n| (id, n)))).await?;
    Ok(Json(json!({ "id": removed.0, "removed_chunks": removed.1 })))
}

async fn list_adapters(State(state): State<Arc<AppState>>) -> Json<Vec<AdapterSummary>> {
    Json(state.pipeline.read(|s| {
        s.adapters
            .ids()
            .into_iter()
            .filter_map(|id| {
                let a = s.adapters.get(&id)?;
                Some(AdapterSummary {
                    chunks: s.store.tag_count(&id),
                    id,
                    rank: a.rank(),
                    alpha: a.alpha(),
                    hintable: a.hintable,
                    metadata: a.metadata.clone(),
                })
            })
            .collect()
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrantsBody {
    pub grants: Vec<String>,
}

async fn set_permissions(
    State(state): State<Arc<AppState>>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let body: GrantsBody = parse(&body)?;
    let grants = body.grants.iter().map(|g| adapter_id(g)).collect::<ApiResult<BTreeSet<_>>>()?;
    let st = state.clone();
    let uid = user_id.clone();
    let grants = blocking(move || {
        st.mutate(|p| {
            p.write(|s| {
                if let Some(unknown) = grants.iter().find(|g| !s.adapters.contains(g)) {
                    return Err(Error::UnknownId(unknown.to_string()));
                }
                s.permissions.set_permissions(&uid, grants.clone());
                Ok(grants)
            })
        })
    })
    .await?;
    Ok(Json(json!({ "user_id": user_id, "grants": grants })))
}

async fn list_permissions(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(state.pipeline.read(|s| {
        json!({
            "adapters": s.adapters.ids(),
            "users": s.permissions.vectors(),
        })
    }))
}
