//! Deterministic offline backends.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::{
    BackendError, ChatBackend, ChatRequest, EmbedRole, EmbeddingBackend, EmbeddingRequest, EmbeddingVector, Part,
    DEFAULT_DIM,
};
use crate::text::alnum_tokens;

/// Seed of the bucket hash.
pub const BUCKET_SEED: u64 = 0;
/// Seed of the sign hash.
pub const SIGN_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatFixture {
    pub template_id: String,
    pub trigger: String,
    pub response: String,
}

/// On-disk fixture set: `{"chat": [...], "fallbacks": {"answer": "..."}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    #[serde(default)]
    pub chat: Vec<ChatFixture>,
    #[serde(default)]
    pub fallbacks: HashMap<String, String>,
}

impl FixtureFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path.as_ref())
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&raw).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }
}

/// Chat mock answering from fixtures.
///
/// A request for template `t` returns the response of the fixture of `t`
/// whose trigger occurs earliest in the request: as a whole-word substring of
/// a text part, or equal to an image reference. Position is (part index, byte
/// offset); equal positions go to the fixture declared first. With no hit the
/// template's fallback is returned, or [`BackendError::NoFixture`].
#[derive(Debug, Clone, Default)]
pub struct MockChatBackend {
    by_template: HashMap<String, Vec<(String, String)>>,
    fallbacks: HashMap<String, String>,
}

impl MockChatBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fixtures(file: FixtureFile) -> Self {
        let mut mock = Self { fallbacks: file.fallbacks, ..Self::default() };
        for f in file.chat {
            mock.add_fixture(f.template_id, f.trigger, f.response);
        }
        mock
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        FixtureFile::load(path).map(Self::from_fixtures)
    }

    pub fn add_fixture(&mut self, template_id: impl Into<String>, trigger: impl Into<String>, response: impl Into<String>) {
        self.by_template
            .entry(template_id.into())
            .or_default()
            .push((trigger.into(), response.into()));
    }

    pub fn set_fallback(&mut self, template_id: impl Into<String>, response: impl Into<String>) {
        self.fallbacks.insert(template_id.into(), response.into());
    }

    fn lookup(&self, req: &ChatRequest) -> Option<&str> {
        let fixtures = self.by_template.get(&req.template_id)?;
        fixtures
            .iter()
            .filter_map(|(trigger, response)| {
                req.parts
                    .iter()
                    .enumerate()
                    .find_map(|(i, p)| part_position(p, trigger).map(|at| (i, at)))
                    .map(|pos| (pos, response))
            })
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, response)| response.as_str())
    }
}

fn part_position(part: &Part, trigger: &str) -> Option<usize> {
    match part {
        Part::Image(id) => (id == trigger).then_some(0),
        Part::Text(text) => find_word(text, trigger),
    }
}

/// Byte offset of the first occurrence of `needle` not glued to adjacent alphanumerics.
fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let starts_alnum = needle.chars().next().is_some_and(char::is_alphanumeric);
    let ends_alnum = needle.chars().last().is_some_and(char::is_alphanumeric);
    haystack.match_indices(needle).map(|(at, _)| at).find(|&at| {
        let before_ok = !starts_alnum || !haystack[..at].chars().last().is_some_and(char::is_alphanumeric);
        let after_ok = !ends_alnum || !haystack[at + needle.len()..].chars().next().is_some_and(char::is_alphanumeric);
        before_ok && after_ok
    })
}

impl ChatBackend for MockChatBackend {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        self.lookup(req)
            .or_else(|| self.fallbacks.get(&req.template_id).map(String::as_str))
            .map(str::to_owned)
            .ok_or_else(|| BackendError::NoFixture { template_id: req.template_id.clone() })
    }
}

/// Feature-hashing embedder.
///
/// Text parts are lowercased and split on non-alphanumerics; each image
/// reference contributes its id as one token; the role contributes the token
/// `role:query` or `role:evidence`. Token `t` adds `±1` at bucket
/// `xxh64(t, BUCKET_SEED) mod dim`, with sign `+` when
/// `xxh64(t, SIGN_SEED)` is even. The sum is L2-normalized.
pub fn mock_embedding(parts: &[Part], role: EmbedRole, dim: usize) -> EmbeddingVector {
    let dim = dim.max(8);
    let mut values = vec![0.0f64; dim];
    let mut add = |token: &str| {
        let bucket = (xxh64(token.as_bytes(), BUCKET_SEED) % dim as u64) as usize;
        let sign = if xxh64(token.as_bytes(), SIGN_SEED) % 2 == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign;
    };
    for part in parts {
        match part {
            Part::Text(text) => alnum_tokens(text).for_each(|t| add(&t)),
            Part::Image(id) => add(id),
        }
    }
    add(&format!("role:{}", role.tag()));
    EmbeddingVector::normalized(values).expect("hash features are finite")
}

#[derive(Debug, Clone, Copy)]
pub struct MockEmbeddingBackend {
    dim: usize,
}

impl MockEmbeddingBackend {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(8) }
    }
}

impl Default for MockEmbeddingBackend {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl EmbeddingBackend for MockEmbeddingBackend {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector, BackendError> {
        req.validate()?;
        let dim = req.dim.unwrap_or(self.dim);
        if dim < 8 {
            return Err(BackendError::InvalidRequest(format!("mock embedding needs dim >= 8, got {dim}")));
        }
        Ok(mock_embedding(&req.parts, req.role, dim))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
