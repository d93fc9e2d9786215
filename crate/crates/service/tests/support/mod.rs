//! In-process service fixtures.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use acmix_core::adapters::{AdapterId, LowRankAdapter};
use acmix_core::model::seeded_adapter;
use acmix_service::config::{EmbedderConfig, ModelInit};
use acmix_service::{router, AppState, ServiceConfig};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const TOKEN: &str = "s3cret";

pub fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        embedder: EmbedderConfig::Hash { dim: 256, seed: 1 },
        admin_token: Some(TOKEN.into()),
        model_init: ModelInit {
            signature: acmix_core::model::ModelSignature::new(vec![(16, 16), (16, 4)]).unwrap(),
            seed: 5,
        },
        ..ServiceConfig::default().with_data_dir(dir)
    }
}

pub fn app(config: ServiceConfig) -> (Router, Arc<AppState>) {
    let pipeline = config.open_pipeline().unwrap();
    let state = AppState::new(config, pipeline);
    (router(state.clone()), state)
}

pub fn adapter(state: &AppState, id: &str, seed: u64) -> LowRankAdapter {
    let sig = state.pipeline().read(|s| s.model.signature().clone());
    seeded_adapter(AdapterId::new(id).unwrap(), &sig, &[0, 1], 2, 4.0, 0.2, seed)
        .unwrap()
        .with_metadata("description", format!("all about {id}"))
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Value,
}

pub async fn send(app: &Router, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("x-admin-token", t);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    reply(app, req.body(body).unwrap()).await
}

pub async fn send_raw(app: &Router, method: Method, uri: &str, token: Option<&str>, content_type: &str, bytes: Vec<u8>) -> Reply {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", content_type);
    if let Some(t) = token {
        req = req.header("x-admin-token", t);
    }
    reply(app, req.body(Body::from(bytes)).unwrap()).await
}

async fn reply(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    Reply { status, body }
}

/// Upload `adapter` as raw bytes, then attach `docs` to it.
pub async fn install(app: &Router, adapter: &LowRankAdapter, docs: &[(&str, &str)]) {
    let id = adapter.id().to_string();
    let r = send_raw(app, Method::POST, "/v1/admin/adapters", Some(TOKEN), "application/octet-stream", adapter.to_bytes().unwrap()).await;
    assert_eq!(r.status, StatusCode::CREATED, "{:?}", r.body);
    if !docs.is_empty() {
        let documents: Vec<Value> = docs
            .iter()
            .map(|(d, t)| serde_json::json!({ "doc_id": d, "text": t }))
            .collect();
        let r = send(
            app,
            Method::POST,
            &format!("/v1/admin/adapters/{id}/documents"),
            Some(TOKEN),
            Some(serde_json::json!({ "documents": documents })),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    }
}

pub fn active_ids(body: &Value) -> Vec<String> {
    body["active"].as_array().unwrap().iter().map(|a| a["id"].as_str().unwrap().to_owned()).collect()
}

pub fn hint_ids(body: &Value) -> Vec<String> {
    body["hints"].as_array().unwrap().iter().map(|a| a["id"].as_str().unwrap().to_owned()).collect()
}

pub fn weights(body: &Value) -> BTreeMap<String, f64> {
    body["active"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["id"].as_str().unwrap().to_owned(), a["weight"].as_f64().unwrap()))
        .collect()
}
