//! Adapter profile mapping the engine's chat/embed contract onto
//! OpenAI-compatible `/v1/chat/completions` and `/v1/embeddings` endpoints.
//!
//! The template id travels as a system message `template_id: <id>`; parts map
//! to multi-part user content. Image references become `image_url` entries
//! (`image_base` + id). Embedding roles become `query: ` / `passage: `
//! prefixes on the input text.

use std::time::Duration;

use serde_json::{json, Value};

use super::http::post_json;
use super::{BackendError, ChatBackend, ChatRequest, EmbedRole, EmbeddingBackend, EmbeddingRequest, EmbeddingVector, Part};

pub(super) const TEMPLATE_PREFIX: &str = "template_id: ";
pub(super) const IMAGE_TOKEN_OPEN: &str = "[image:";

#[derive(Debug, Clone)]
pub struct OpenAiCompatBackend {
    base_url: String,
    chat_model: String,
    embed_model: String,
    api_key: Option<String>,
    image_base: String,
    dim: usize,
    agent: ureq::Agent,
}

impl OpenAiCompatBackend {
    pub fn new(base_url: impl Into<String>, chat_model: impl Into<String>, embed_model: impl Into<String>, dim: usize) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            chat_model: chat_model.into(),
            embed_model: embed_model.into(),
            api_key: None,
            image_base: String::new(),
            dim,
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(5))
                .timeout(Duration::from_secs(300))
                .build(),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    /// Prefix turning image ids into URLs, e.g. `https://cdn.example/img/`.
    pub fn with_image_base(mut self, base: impl Into<String>) -> Self {
        self.image_base = base.into();
        self
    }

    pub fn chat_body(&self, req: &ChatRequest) -> Value {
        let content: Vec<Value> = req
            .parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => json!({"type": "text", "text": t}),
                Part::Image(id) => json!({"type": "image_url", "image_url": {"url": format!("{}{id}", self.image_base)}}),
            })
            .collect();
        json!({
            "model": self.chat_model,
            "temperature": req.temperature,
            "seed": req.seed,
            "messages": [
                {"role": "system", "content": format!("{TEMPLATE_PREFIX}{}", req.template_id)},
                {"role": "user", "content": content},
            ],
        })
    }

    pub fn embed_body(&self, req: &EmbeddingRequest, dim: usize) -> Value {
        json!({
            "model": self.embed_model,
            "input": embed_input(req.role, &req.parts),
            "dimensions": dim,
        })
    }
}

pub(super) fn role_prefix(role: EmbedRole) -> &'static str {
    match role {
        EmbedRole::Query => "query: ",
        EmbedRole::Evidence => "passage: ",
    }
}

fn embed_input(role: EmbedRole, parts: &[Part]) -> String {
    let body: Vec<String> = parts
        .iter()
        .map(|p| match p {
            Part::Text(t) => t.clone(),
            Part::Image(id) => format!("{IMAGE_TOKEN_OPEN}{id}]"),
        })
        .collect();
    format!("{}{}", role_prefix(role), body.join("\n"))
}

impl ChatBackend for OpenAiCompatBackend {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        let url = format!("{}/v1/chat/completions", self.base_url);
        let resp: Value = post_json(&self.agent, &url, self.api_key.as_deref(), self.chat_body(req))?
            .into_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }
}

impl EmbeddingBackend for OpenAiCompatBackend {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector, BackendError> {
        req.validate()?;
        let dim = req.dim.unwrap_or(self.dim);
        let url = format!("{}/v1/embeddings", self.base_url);
        let resp: Value = post_json(&self.agent, &url, self.api_key.as_deref(), self.embed_body(req, dim))?
            .into_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let values: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(BackendError::DimMismatch { expected: dim, got: values.len() });
        }
        EmbeddingVector::normalized(values)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_shape() {
        let backend = OpenAiCompatBackend::new("http://x", "m", "e", 16).with_image_base("file:///img/");
        let req = ChatRequest::new("answer", vec![Part::image("i1"), Part::text("q?")]);
        let body = backend.chat_body(&req);
        assert_eq!(body["messages"][0]["content"], "template_id: answer");
        assert_eq!(body["messages"][1]["content"][0]["image_url"]["url"], "file:///img/i1");
        assert_eq!(body["messages"][1]["content"][1]["text"], "q?");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn embed_body_prefixes_role() {
        let backend = OpenAiCompatBackend::new("http://x", "m", "e", 16);
        let req = EmbeddingRequest::new(EmbedRole::Evidence, vec![Part::text("abc"), Part::image("i2")]);
        assert_eq!(backend.embed_body(&req, 16)["input"], "passage: abc\n[image:i2]");
    }
}
