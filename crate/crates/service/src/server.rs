//! JSON/HTTP API over a shared [`Engine`].
//!
//! | method | path                | body / query                        |
//! |--------|---------------------|-------------------------------------|
//! | GET    | `/v1/health`        |                                     |
//! | GET    | `/v1/studies`       |                                     |
//! | POST   | `/v1/studies`       | raw `CTFV` bytes, `?study_id=`      |
//! | POST   | `/v1/qa`            | `{study_id, question, session?}`    |
//! | POST   | `/v1/report`        | `{study_id, session?}`              |
//! | GET    | `/v1/jobs/{id}`     | poll an asynchronous report         |
//! | GET    | `/v1/history`       | `?session=&kind=&trace_id=&limit=`  |
//!
//! Episode responses carry the trace id in the body and in an
//! `x-trace-id` header. Engine calls run on the blocking pool.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ctagent_core::backend::BackendError;
use ctagent_core::feature_io::VolumeFeatures;
use ctagent_core::memory::{EpisodeKind, HistoryFilter, HistoryRecord};
use ctagent_core::orchestration::{Engine, EngineError, ReportOutcome};
use ctagent_core::RegionId;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{EngineConfig, ServiceError};

pub const TRACE_HEADER: &str = "x-trace-id";
const DEFAULT_SESSION: &str = "default";

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done { result: Box<ReportOutcome> },
    Failed { error: String },
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub async_reports: bool,
    jobs: Arc<Mutex<HashMap<String, JobState>>>,
    in_flight: Arc<AtomicUsize>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, async_reports: bool) -> Self {
        Self {
            engine,
            async_reports,
            jobs: Arc::default(),
            in_flight: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Episodes currently executing, including background reports.
    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Runs `f` on the blocking pool, counted as in flight until it returns.
    async fn run_blocking<T: Send + 'static>(
        &self,
        f: impl FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let engine = self.engine.clone();
        let guard = InFlight::new(self.in_flight.clone());
        tokio::task::spawn_blocking(move || {
            let _guard = guard;
            f(&engine)
        })
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
        .map_err(ApiError::from)
    }
}

struct InFlight(Arc<AtomicUsize>);

impl InFlight {
    fn new(c: Arc<AtomicUsize>) -> Self {
        c.fetch_add(1, Ordering::SeqCst);
        Self(c)
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, kind) = match &e {
            EngineError::StudyNotFound(_) => (StatusCode::NOT_FOUND, "StudyNotFound"),
            EngineError::InvalidStudy(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidStudy"),
            EngineError::TaskMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "TaskMismatch"),
            EngineError::UnknownRegion { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "UnknownRegion"),
            EngineError::Backend(BackendError::Unavailable(_)) => (StatusCode::BAD_GATEWAY, "BackendUnavailable"),
            EngineError::Backend(BackendError::Protocol(_)) => (StatusCode::BAD_GATEWAY, "BackendProtocol"),
            EngineError::Planner(_) => (StatusCode::BAD_GATEWAY, "PlannerError"),
            EngineError::Format(_) => (StatusCode::BAD_REQUEST, "FormatError"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "EngineError"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let trace_id = uuid::Uuid::new_v4().to_string();
        let body = json!({"error": self.kind, "message": self.message, "trace_id": trace_id});
        with_trace(&trace_id, body, self.status)
    }
}

/// Gives responses that carry no episode trace a fresh id of their own.
async fn ensure_trace(mut resp: Response) -> Response {
    if !resp.headers().contains_key(TRACE_HEADER) {
        let id = uuid::Uuid::new_v4().to_string();
        if let Ok(v) = HeaderValue::from_str(&id) {
            resp.headers_mut().insert(TRACE_HEADER, v);
        }
    }
    resp
}

fn with_trace(trace_id: &str, body: impl Serialize, status: StatusCode) -> Response {
    let mut resp = (status, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(trace_id) {
        resp.headers_mut().insert(TRACE_HEADER, v);
    }
    resp
}

pub fn router(state: AppState, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/studies", get(list_studies).post(upload_study))
        .route("/v1/qa", post(qa))
        .route("/v1/report", post(report))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/history", get(history))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .layer(axum::middleware::map_response(ensure_trace))
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "studies": s.engine.studies().len(),
        "exemplars": s.engine.store().len(),
        "history": s.engine.history().len(),
        "in_flight": s.in_flight(),
    }))
}

async fn list_studies(State(s): State<AppState>) -> impl IntoResponse {
    Json(json!({ "studies": s.engine.studies() }))
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    study_id: Option<String>,
}

async fn upload_study(
    State(s): State<AppState>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let id = q.study_id.unwrap_or_else(|| format!("study-{}", &uuid::Uuid::new_v4().simple().to_string()[..8]));
    if id.is_empty() || id.len() > 128 || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "InvalidStudyId", format!("invalid study id {id:?}")));
    }
    let summary = s
        .run_blocking(move |engine| {
            let vf = VolumeFeatures::from_bytes(id, &body)?;
            engine.add_study(vf)
        })
        .await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

#[derive(Debug, Deserialize)]
pub struct QaRequest {
    pub study_id: String,
    pub question: String,
    #[serde(default)]
    pub session: Option<String>,
}

async fn qa(State(s): State<AppState>, Json(req): Json<QaRequest>) -> Result<Response, ApiError> {
    let session = req.session.unwrap_or_else(|| DEFAULT_SESSION.into());
    let out = s.run_blocking(move |e| e.run_qa(&req.question, &req.study_id, &session)).await?;
    let region: Option<RegionId> = out.regions.first().copied();
    let body = json!({
        "trace_id": out.trace_id,
        "answer": out.answer,
        "region": region.map(|r| r.canonical_name()),
        "regions": out.regions,
        "rewritten": out.rewritten,
        "findings": out.findings,
        "vision_tokens": out.vision_tokens,
        "trace": out.trace,
    });
    Ok(with_trace(&out.trace_id, body, StatusCode::OK))
}

#[derive(Debug, Deserialize)]
pub struct ReportRequest {
    pub study_id: String,
    #[serde(default)]
    pub session: Option<String>,
}

async fn report(State(s): State<AppState>, Json(req): Json<ReportRequest>) -> Result<Response, ApiError> {
    let session = req.session.unwrap_or_else(|| DEFAULT_SESSION.into());
    if !s.async_reports {
        let out = s.run_blocking(move |e| e.run_report(&req.study_id, &session)).await?;
        let id = out.trace_id.clone();
        return Ok(with_trace(&id, out, StatusCode::OK));
    }
    // Reject unknown studies before accepting the job.
    s.engine.study(&req.study_id).map_err(ApiError::from)?;
    let job_id = uuid::Uuid::new_v4().to_string();
    s.jobs.lock().unwrap_or_else(|e| e.into_inner()).insert(job_id.clone(), JobState::Running);
    let state = s.clone();
    let jid = job_id.clone();
    // Count the job before it is first polled so shutdown cannot miss it.
    let pending = InFlight::new(s.in_flight.clone());
    tokio::spawn(async move {
        let _pending = pending;
        let result = state.run_blocking(move |e| e.run_report(&req.study_id, &session)).await;
        let done = match result {
            Ok(out) => JobState::Done { result: Box::new(out) },
            Err(e) => JobState::Failed { error: e.message },
        };
        state.jobs.lock().unwrap_or_else(|e| e.into_inner()).insert(jid, done);
    });
    let poll_url = format!("/v1/jobs/{job_id}");
    let mut resp = (StatusCode::ACCEPTED, Json(json!({"job_id": job_id, "poll_url": poll_url}))).into_response();
    if let Ok(v) = HeaderValue::from_str(&poll_url) {
        resp.headers_mut().insert(axum::http::header::LOCATION, v);
    }
    Ok(resp)
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let state = s.jobs.lock().unwrap_or_else(|e| e.into_inner()).get(&id).cloned();
    match state {
        Some(JobState::Done { result }) => {
            let tid = result.trace_id.clone();
            Ok(with_trace(&tid, JobState::Done { result }, StatusCode::OK))
        }
        Some(other) => Ok(Json(other).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "JobNotFound", format!("job {id:?} not found"))),
    }
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    session: Option<String>,
    kind: Option<EpisodeKind>,
    trace_id: Option<String>,
    limit: Option<usize>,
}

async fn history(State(s): State<AppState>, Query(q): Query<HistoryQuery>) -> Json<serde_json::Value> {
    let filter = HistoryFilter { session: q.session, kind: q.kind, trace_id: q.trace_id, limit: q.limit };
    let records: Vec<HistoryRecord> = s.engine.history().query(&filter);
    Json(json!({ "records": records }))
}

/// Binds `cfg.server.listen` and serves until `shutdown` resolves, then
/// waits for in-flight episodes to finish.
pub async fn serve(
    engine: Arc<Engine>,
    cfg: &EngineConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr = cfg.listen_addr()?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::BindFailure { addr: addr.to_string(), source })?;
    serve_on(listener, engine, cfg, shutdown).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    engine: Arc<Engine>,
    cfg: &EngineConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let state = AppState::new(engine, cfg.server.async_reports);
    let app = router(state.clone(), cfg.server.max_upload_bytes);
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "listening");
    }
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Io { path: "listener".into(), source: e })?;
    while state.in_flight() > 0 {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down; draining in-flight episodes");
}
