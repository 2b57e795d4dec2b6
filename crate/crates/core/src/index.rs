//! Exact cosine top-k index over document, entity, edge and segment vectors.
//!
//! Vectors are stored as contiguous `f32` rows per kind; scores are computed
//! in `f64`. File layout (little-endian):
//!
//! ```text
//! header (32 bytes): magic "MKGI" | version u16 | reserved u16 | dim u32 |
//!                    count u64 | body_len u64 | crc32(body) u32
//! body:              count * dim f32 vectors
//!                    count * (kind u8, id_len u32, id, payload_len u32, payload)
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"MKGI";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 32;
/// Partitions larger than this are scored in parallel.
const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checksum mismatch")]
    Checksum,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Document,
    Entity,
    Edge,
    Segment,
}

impl ItemKind {
    pub const ALL: [ItemKind; 4] = [ItemKind::Document, ItemKind::Entity, ItemKind::Edge, ItemKind::Segment];

    fn slot(self) -> usize {
        self as usize
    }

    fn from_slot(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemKind::Document => "document",
            ItemKind::Entity => "entity",
            ItemKind::Edge => "edge",
            ItemKind::Segment => "segment",
        })
    }
}

impl FromStr for ItemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.to_string() == s).ok_or_else(|| format!("unknown kind: {s}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub item_id: String,
    pub kind: ItemKind,
    pub vector: Vec<f64>,
    /// Where the item lives, e.g. a KG file or segment id.
    pub payload_ref: String,
}

impl IndexEntry {
    pub fn new(kind: ItemKind, item_id: impl Into<String>, vector: Vec<f64>, payload_ref: impl Into<String>) -> Self {
        Self { item_id: item_id.into(), kind, vector, payload_ref: payload_ref.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub item_id: String,
    pub kind: ItemKind,
    pub score: f64,
}

/// Score descending, then id ascending.
pub fn hit_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a.iter().copied()), norm(b.iter().copied()));
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Partition {
    ids: Vec<String>,
    payloads: Vec<String>,
    data: Vec<f32>,
    norms: Vec<f64>,
    pos: HashMap<String, usize>,
}

impl Partition {
    fn row(&self, i: usize, dim: usize) -> &[f32] {
        &self.data[i * dim..(i + 1) * dim]
    }

    fn put(&mut self, id: &str, payload: &str, row: &[f32]) {
        let n = norm(row.iter().map(|&x| x as f64));
        match self.pos.get(id) {
            Some(&i) => {
                let dim = row.len();
                self.data[i * dim..(i + 1) * dim].copy_from_slice(row);
                self.norms[i] = n;
                self.payloads[i] = payload.to_string();
            }
            None => {
                self.pos.insert(id.to_string(), self.ids.len());
                self.ids.push(id.to_string());
                self.payloads.push(payload.to_string());
                self.data.extend_from_slice(row);
                self.norms.push(n);
            }
        }
    }

    fn score(&self, i: usize, dim: usize, query: &[f64], qnorm: f64) -> f64 {
        let dot: f64 = self.row(i, dim).iter().zip(query).map(|(&x, y)| x as f64 * y).sum();
        (dot / (self.norms[i] * qnorm)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpsertOutcome {
    pub applied: usize,
    pub errors: Vec<(String, IndexErrorKind)>,
}

/// Per-entry rejection reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexErrorKind {
    DimMismatch,
    ZeroVector,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    parts: [Partition; 4],
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, parts: Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len_kind(&self, kind: ItemKind) -> usize {
        self.parts[kind.slot()].ids.len()
    }

    pub fn ids(&self, kind: ItemKind) -> &[String] {
        &self.parts[kind.slot()].ids
    }

    pub fn contains(&self, kind: ItemKind, id: &str) -> bool {
        self.parts[kind.slot()].pos.contains_key(id)
    }

    /// Stored (f32-rounded) vector.
    pub fn vector(&self, kind: ItemKind, id: &str) -> Option<Vec<f64>> {
        let p = &self.parts[kind.slot()];
        p.pos.get(id).map(|&i| p.row(i, self.dim).iter().map(|&x| x as f64).collect())
    }

    pub fn payload(&self, kind: ItemKind, id: &str) -> Option<&str> {
        let p = &self.parts[kind.slot()];
        p.pos.get(id).map(|&i| p.payloads[i].as_str())
    }

    /// Inserts or replaces by `(kind, item_id)`. Bad entries are reported and
    /// skipped; the rest of the batch still applies.
    pub fn upsert(&mut self, entries: impl IntoIterator<Item = IndexEntry>) -> UpsertOutcome {
        let mut outcome = UpsertOutcome::default();
        for e in entries {
            let problem = if e.vector.len() != self.dim {
                Some(IndexErrorKind::DimMismatch)
            } else if e.vector.iter().any(|x| !x.is_finite()) {
                Some(IndexErrorKind::NonFinite)
            } else if e.vector.iter().all(|&x| x as f32 == 0.0) {
                Some(IndexErrorKind::ZeroVector)
            } else {
                None
            };
            if let Some(kind) = problem {
                outcome.errors.push((e.item_id, kind));
                continue;
            }
            let row: Vec<f32> = e.vector.iter().map(|&x| x as f32).collect();
            self.parts[e.kind.slot()].put(&e.item_id, &e.payload_ref, &row);
            outcome.applied += 1;
        }
        outcome
    }

    fn check_query(&self, query: &[f64]) -> Result<f64, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: query.len() });
        }
        let n = norm(query.iter().copied());
        if n == 0.0 || !n.is_finite() {
            return Err(IndexError::ZeroVector);
        }
        Ok(n)
    }

    /// Cosine score of one stored item.
    pub fn score(&self, query: &[f64], kind: ItemKind, id: &str) -> Result<Option<f64>, IndexError> {
        let qn = self.check_query(query)?;
        let p = &self.parts[kind.slot()];
        Ok(p.pos.get(id).map(|&i| p.score(i, self.dim, query, qn)))
    }

    /// Every item of `kind`, sorted by score descending then id ascending.
    pub fn score_all(&self, query: &[f64], kind: ItemKind) -> Result<Vec<ScoredHit>, IndexError> {
        self.search_topk(query, kind, usize::MAX)
    }

    /// Exactly `min(k, size)` hits, score descending, ties by id ascending.
    pub fn search_topk(&self, query: &[f64], kind: ItemKind, k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let qn = self.check_query(query)?;
        let p = &self.parts[kind.slot()];
        let n = p.ids.len();
        let score_one = |i: usize| (p.score(i, self.dim, query, qn), i);
        let mut scored: Vec<(f64, usize)> = if n >= PAR_THRESHOLD {
            (0..n).into_par_iter().map(score_one).collect()
        } else {
            (0..n).map(score_one).collect()
        };
        let cmp = |a: &(f64, usize), b: &(f64, usize)| hit_order(a.0, &p.ids[a.1], b.0, &p.ids[b.1]);
        if k < n {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, i)| ScoredHit { item_id: p.ids[i].clone(), kind, score })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        for p in &self.parts {
            for x in &p.data {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        for kind in ItemKind::ALL {
            let p = &self.parts[kind.slot()];
            for (id, payload) in p.ids.iter().zip(&p.payloads) {
                body.push(kind as u8);
                for s in [id, payload] {
                    body.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    body.extend_from_slice(s.as_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < HEADER_LEN {
            return Err(IndexError::Checksum);
        }
        if &bytes[..4] != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(IndexError::Corrupt(format!("unsupported version {version}")));
        }
        let dim = u32_at(8) as usize;
        let count = u64_at(12) as usize;
        let body_len = u64_at(20) as usize;
        let crc = u32_at(28);
        let body = &bytes[HEADER_LEN..];
        if body.len() != body_len || crc32fast::hash(body) != crc {
            return Err(IndexError::Checksum);
        }
        let corrupt = |m: &str| IndexError::Corrupt(m.to_string());
        let vec_bytes = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| corrupt("size overflow"))?;
        if vec_bytes > body.len() {
            return Err(corrupt("vector block exceeds body"));
        }
        let floats: Vec<f32> = body[..vec_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut cursor = vec_bytes;
        let mut take = |n: usize| -> Result<&[u8], IndexError> {
            let end = cursor.checked_add(n).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated id table"))?;
            let s = &body[cursor..end];
            cursor = end;
            Ok(s)
        };
        let mut index = VectorIndex::new(dim);
        for row in 0..count {
            let kind = ItemKind::from_slot(take(1)?[0]).ok_or_else(|| corrupt("bad kind"))?;
            let mut strings = [String::new(), String::new()];
            for s in &mut strings {
                let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                *s = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("non-utf8 id"))?;
            }
            let [id, payload] = strings;
            if index.contains(kind, &id) {
                return Err(corrupt("duplicate id"));
            }
            index.parts[kind.slot()].put(&id, &payload, &floats[row * dim..(row + 1) * dim]);
        }
        if cursor != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(kind: ItemKind, id: &str, v: &[f64]) -> IndexEntry {
        IndexEntry::new(kind, id, v.to_vec(), "")
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(IndexError::DimMismatch { .. })));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(IndexError::ZeroVector)));
    }

    #[test]
    fn upsert_replaces_and_rejects() {
        let mut idx = VectorIndex::new(2);
        let out = idx.upsert([
            e(ItemKind::Entity, "a", &[1.0, 0.0]),
            e(ItemKind::Entity, "b", &[0.0, 1.0]),
            e(ItemKind::Entity, "c", &[1.0, 1.0]),
        ]);
        assert_eq!(out.applied, 3);
        idx.upsert([e(ItemKind::Entity, "a", &[0.0, 1.0])]);
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.vector(ItemKind::Entity, "a").unwrap(), vec![0.0, 1.0]);
        let bad = idx.upsert([e(ItemKind::Entity, "d", &[1.0, 0.0, 0.0])]);
        assert_eq!((bad.applied, bad.errors.len()), (0, 1));
    }

    #[test]
    fn ties_break_by_id_and_kinds_are_separate() {
        let mut idx = VectorIndex::new(2);
        idx.upsert([
            e(ItemKind::Entity, "z", &[1.0, 0.0]),
            e(ItemKind::Entity, "m", &[1.0, 0.0]),
            e(ItemKind::Entity, "a", &[0.0, 1.0]),
            e(ItemKind::Edge, "x", &[1.0, 0.0]),
        ]);
        let hits = idx.search_topk(&[1.0, 0.0], ItemKind::Entity, 10).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.item_id.as_str()).collect();
        assert_eq!(ids, ["m", "z", "a"]);
        assert!(idx.search_topk(&[1.0, 0.0], ItemKind::Document, 3).unwrap().is_empty());
        assert!(matches!(idx.search_topk(&[1.0, 0.0], ItemKind::Entity, 0), Err(IndexError::InvalidK)));
    }

    #[test]
    fn persistence_round_trip_and_truncation() {
        let mut idx = VectorIndex::new(3);
        idx.upsert([
            IndexEntry::new(ItemKind::Document, "d1", vec![1.0, 2.0, 3.0], "docs/d1"),
            IndexEntry::new(ItemKind::Segment, "d1#0", vec![0.5, -1.0, 0.25], "d1#0"),
        ]);
        let bytes = idx.to_bytes();
        let back = VectorIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.payload(ItemKind::Document, "d1"), Some("docs/d1"));
        assert!(matches!(VectorIndex::from_bytes(&bytes[..bytes.len() - 3]), Err(IndexError::Checksum)));

        let empty = VectorIndex::new(7);
        assert_eq!(VectorIndex::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }
}
