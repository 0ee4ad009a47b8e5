#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use ctagent::server::{router, AppState};
use ctagent::{build_engine, EngineConfig};
use ctagent_core::feature_io::{generate_synthetic_volume, VolumeDims, VolumeFeatures};
use http_body_util::BodyExt;
use tower::ServiceExt;

/// Mock backends with a small projection so debug-mode tests stay quick.
pub fn mock_config() -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.backend.mock = true;
    cfg.compression.dominant = 4;
    cfg.compression.contextual = 2;
    cfg.compression.projected_dim = 64;
    cfg
}

pub fn small_dims() -> VolumeDims {
    VolumeDims::new(8, 32, 16, 2, 8)
}

pub fn synthetic(study_id: &str, seed: u64) -> VolumeFeatures {
    let mut vf = generate_synthetic_volume(seed, small_dims()).unwrap();
    vf.study_id = study_id.to_string();
    vf
}

pub fn app(cfg: &EngineConfig) -> (Router, AppState) {
    let engine = Arc::new(build_engine(cfg).unwrap());
    let state = AppState::new(engine, cfg.server.async_reports);
    (router(state.clone(), cfg.server.max_upload_bytes), state)
}

pub struct Reply {
    pub status: StatusCode,
    pub trace_header: Option<String>,
    pub headers: axum::http::HeaderMap,
    pub json: serde_json::Value,
}

pub async fn send(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let trace_header = headers.get("x-trace-id").map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    Reply { status, trace_header, headers, json }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post_json(app: &Router, uri: &str, body: serde_json::Value) -> Reply {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

pub async fn upload(app: &Router, study_id: &str, bytes: Vec<u8>) -> Reply {
    let req = Request::post(format!("/v1/studies?study_id={study_id}"))
        .header("content-type", "application/octet-stream")
        .body(Body::from(bytes))
        .unwrap();
    send(app, req).await
}
