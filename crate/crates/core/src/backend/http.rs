//! Blocking HTTP clients for live backends.
//!
//! Every request attempt increments a process-wide counter so tests can
//! assert that an offline configuration never touches the network.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{BackendError, ChatRequest, ChatResponse, EmbedRequest, EmbedResponse, EmbeddingClient, LlmClient};

static OUTBOUND_ATTEMPTS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests attempted by backend clients in this process.
pub fn outbound_attempts() -> usize {
    OUTBOUND_ATTEMPTS.load(Ordering::SeqCst)
}

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

fn build_client(timeout: Duration) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Unavailable(format!("building HTTP client: {e}")))
}

fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &Req,
) -> Result<Resp, BackendError> {
    OUTBOUND_ATTEMPTS.fetch_add(1, Ordering::SeqCst);
    let resp = client
        .post(url)
        .json(body)
        .send()
        .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(BackendError::Unavailable(format!("{url}: HTTP {status}: {text}")));
    }
    resp.json().map_err(|e| BackendError::Protocol(format!("{url}: {e}")))
}

#[derive(Debug, Clone)]
pub struct HttpLlmClient {
    url: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Result<Self, BackendError> {
        Self::with_timeout(url, model, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        Ok(Self { url: url.into(), model: model.into(), client: build_client(timeout)? })
    }
}

impl LlmClient for HttpLlmClient {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.model, self.url)
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut req = req.clone();
        if req.model.is_empty() {
            req.model = self.model.clone();
        }
        let resp: ChatResponse = post_json(&self.client, &self.url, &req)?;
        if resp.text.is_empty() {
            return Err(BackendError::Protocol(format!("{}: empty completion", self.url)));
        }
        Ok(resp)
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbeddingClient {
    url: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Result<Self, BackendError> {
        Ok(Self { url: url.into(), model: model.into(), client: build_client(DEFAULT_TIMEOUT)? })
    }
}

impl EmbeddingClient for HttpEmbeddingClient {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.model, self.url)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let req = EmbedRequest { model: self.model.clone(), input: text.to_string() };
        let resp: EmbedResponse = post_json(&self.client, &self.url, &req)?;
        Ok(resp.embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refused_connection_is_unavailable() {
        // Port 9 (discard) on localhost is closed in test sandboxes.
        let c = HttpLlmClient::with_timeout("http://127.0.0.1:9/v1/chat", "m", Duration::from_secs(2)).unwrap();
        let before = outbound_attempts();
        assert!(matches!(c.complete(&ChatRequest::user("x")), Err(BackendError::Unavailable(_))));
        assert!(outbound_attempts() > before);
    }
}
