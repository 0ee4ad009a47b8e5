//! Model backends: chat-style LLMs and sentence embedders.
//!
//! Both sit behind traits so the pipelines run unchanged against a live HTTP
//! service or the deterministic mocks in [`mock`].
//!
//! Wire contract: `POST {messages, model, adapter_id?, vision_ref?}` returns
//! `{text, logprobs?}`; embedding requests are `{model, input}` returning
//! `{embedding}`.

pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{outbound_attempts, HttpEmbeddingClient, HttpLlmClient};
pub use mock::{synthetic_report, MockEmbedder, MockLlm, ScriptedLlm, IMAGE_END, IMAGE_START, MOCK_EMBEDDING_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
    /// Key of the projected vision tokens for the study, sent as a side channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision_ref: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { model: String::new(), messages, adapter_id: None, vision_ref: None }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(vec![ChatMessage::user(content)])
    }

    /// Concatenated content of all user messages.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    #[serde(default)]
    pub model: String,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f32>,
}

pub trait LlmClient: Send + Sync {
    /// Identifier reported in generation results.
    fn backend_id(&self) -> String;

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait EmbeddingClient: Send + Sync {
    fn backend_id(&self) -> String;

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;
}

impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(req)
    }
}

impl<T: EmbeddingClient + ?Sized> EmbeddingClient for std::sync::Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        (**self).embed(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_omitted_on_the_wire() {
        let req = ChatRequest::user("hi");
        let json = serde_json::to_value(&req).unwrap();
        assert_eq!(json, serde_json::json!({"model": "", "messages": [{"role": "user", "content": "hi"}]}));
        let resp: ChatResponse = serde_json::from_str(r#"{"text":"ok"}"#).unwrap();
        assert_eq!(resp.logprobs, None);
    }
}
