//! Model-service contracts for chat completion and embedding.
//!
//! Every model role (extractor, matcher, answer generator, question
//! reformulator) goes through [`ChatBackend`] and differs only by
//! `template_id`. Query and evidence encoders share [`EmbeddingBackend`] and
//! are told apart by [`EmbedRole`].

mod http;
mod mock;
mod openai;
mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{mock_embedding, ChatFixture, FixtureFile, MockChatBackend, MockEmbeddingBackend};
pub use openai::OpenAiCompatBackend;
pub use server::MockServer;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no fixture for template {template_id:?}")]
    NoFixture { template_id: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("remote error {status}: {message}")]
    Remote { status: u16, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// One ordered prompt element. Serialized as `{"text": ..}` or `{"image": ..}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Text(String),
    /// Reference to an image asset by id.
    Image(String),
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    pub fn image(id: impl Into<String>) -> Self {
        Part::Image(id.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text(t) => Some(t),
            Part::Image(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: String,
    pub parts: Vec<Part>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ChatRequest {
    pub fn new(template_id: impl Into<String>, parts: Vec<Part>) -> Self {
        Self { template_id: template_id.into(), parts, temperature: 0.0, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.parts.iter().any(|p| matches!(p, Part::Text(_))) {
            return Err(BackendError::InvalidRequest("chat request needs a text part".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedRole {
    Query,
    Evidence,
}

impl EmbedRole {
    pub fn tag(&self) -> &'static str {
        match self {
            EmbedRole::Query => "query",
            EmbedRole::Evidence => "evidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub role: EmbedRole,
    pub parts: Vec<Part>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

impl EmbeddingRequest {
    pub fn new(role: EmbedRole, parts: Vec<Part>) -> Self {
        Self { role, parts, dim: None }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.parts.is_empty() {
            return Err(BackendError::InvalidRequest("embedding request has no parts".into()));
        }
        Ok(())
    }
}

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`. A zero vector becomes the first basis vector;
    /// non-finite input is rejected.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Protocol("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("non-finite embedding value".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
        } else if (norm - 1.0).abs() > 1e-12 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self(values))
    }

    /// Wraps values without normalizing. Caller guarantees finiteness.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector, BackendError>;

    /// Dimension of vectors produced when no hint is given.
    fn dim(&self) -> usize;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        (**self).chat_complete(req)
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector, BackendError> {
        (**self).embed(req)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }
}
