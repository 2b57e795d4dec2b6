//! Client for the native wire contract:
//! `POST /v1/chat {template_id, parts, temperature, seed} -> {text}` and
//! `POST /v1/embed {role, parts, dim} -> {values}`.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, EmbeddingBackend, EmbeddingRequest, EmbeddingVector};

#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    dim: usize,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    values: Vec<f64>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, dim: usize) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .timeout(Duration::from_secs(300))
            .build();
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), dim, agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post(&self, route: &str, body: serde_json::Value) -> Result<ureq::Response, BackendError> {
        post_json(&self.agent, &format!("{}{route}", self.base_url), None, body)
    }
}

/// Posts JSON once; no retries.
pub(super) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: serde_json::Value,
) -> Result<ureq::Response, BackendError> {
    let mut request = agent.post(url).set("content-type", "application/json");
    if let Some(token) = bearer {
        request = request.set("authorization", &format!("Bearer {token}"));
    }
    match request.send_json(body) {
        Ok(resp) => Ok(resp),
        Err(ureq::Error::Status(status, resp)) => {
            let message = resp.into_string().unwrap_or_default();
            Err(BackendError::Remote { status, message })
        }
        Err(ureq::Error::Transport(t)) => Err(BackendError::Transport(t.to_string())),
    }
}

impl ChatBackend for HttpBackend {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        let body = serde_json::to_value(req).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let resp: ChatResponse = self
            .post("/v1/chat", body)?
            .into_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(resp.text)
    }
}

impl EmbeddingBackend for HttpBackend {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector, BackendError> {
        req.validate()?;
        let dim = req.dim.unwrap_or(self.dim);
        let body = json!({"role": req.role, "parts": req.parts, "dim": dim});
        let resp: EmbedResponse = self
            .post("/v1/embed", body)?
            .into_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        if resp.values.len() != dim {
            return Err(BackendError::DimMismatch { expected: dim, got: resp.values.len() });
        }
        EmbeddingVector::normalized(resp.values)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
