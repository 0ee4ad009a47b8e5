//! Stand-alone HTTP server speaking the backend wire contract with the
//! deterministic mock models. Useful for exercising the HTTP clients.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use ctagent_core::backend::{
    ChatRequest, ChatResponse, EmbedRequest, EmbedResponse, LlmClient, MockEmbedder, MockLlm,
};

#[derive(Clone)]
struct MockState {
    llm: Arc<MockLlm>,
    embedder: Arc<MockEmbedder>,
}

/// `POST /v1/chat` and `POST /v1/embed`.
pub fn router() -> Router {
    let state = MockState { llm: Arc::new(MockLlm::new()), embedder: Arc::new(MockEmbedder::default()) };
    Router::new().route("/v1/chat", post(chat)).route("/v1/embed", post(embed)).with_state(state)
}

async fn chat(
    State(s): State<MockState>,
    Json(req): Json<ChatRequest>,
) -> Result<Json<ChatResponse>, (StatusCode, String)> {
    s.llm.complete(&req).map(Json).map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))
}

async fn embed(State(s): State<MockState>, Json(req): Json<EmbedRequest>) -> Json<EmbedResponse> {
    Json(EmbedResponse { embedding: s.embedder.embed_text(&req.input) })
}

/// Serves the mock backend on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router()).with_graceful_shutdown(shutdown).await
}
