//! Multimodal document corpora and image-aware segmentation.
//!
//! A corpus file holds one JSON document per line:
//!
//! ```json
//! {"doc_id": "d1", "title": "Mount Fuji",
//!  "sections": [{"heading": "Overview", "text": "...", "image_ids": ["i1"]}],
//!  "images": [{"image_id": "i1", "uri": "images/i1.jpg", "caption": null}]}
//! ```
//!
//! Sections that carry images always become exactly one segment, whatever
//! their length. Image-free sections are merged greedily up to the chunk
//! budget and oversized chunks are split at sentence boundaries.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text::{count_tokens, normalize_whitespace, split_sentences};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dangling image ref: {0}")]
    DanglingImage(String),
    #[error("unknown document: {0}")]
    UnknownDocument(String),
    #[error("invalid segment id: {0}")]
    InvalidSegmentId(String),
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub image_id: String,
    #[serde(default)]
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    #[serde(default)]
    pub heading: String,
    pub text: String,
    #[serde(default)]
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub sections: Vec<Section>,
    #[serde(default)]
    pub images: Vec<ImageAsset>,
}

impl Document {
    pub fn image(&self, image_id: &str) -> Option<&ImageAsset> {
        self.images.iter().find(|img| img.image_id == image_id)
    }

    /// Checks the per-document invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.doc_id.trim().is_empty() {
            return Err("missing doc_id".into());
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.image_id.as_str()) {
                return Err(format!("duplicate image id: {}", img.image_id));
            }
        }
        for (i, section) in self.sections.iter().enumerate() {
            if section.text.trim().is_empty() {
                return Err(format!("empty section text: section {i}"));
            }
            if let Some(missing) = section.image_ids.iter().find(|id| !seen.contains(id.as_str())) {
                return Err(format!("dangling image ref: {missing}"));
            }
        }
        Ok(())
    }

    /// All section text in order, used as the document-level embedding input.
    pub fn full_text(&self) -> String {
        let mut out = normalize_whitespace(&self.title);
        for section in &self.sections {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&normalize_whitespace(&section.text));
        }
        out
    }
}

/// `doc_id#k`, ordered by document then numeric position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentId {
    pub doc_id: String,
    pub index: usize,
}

impl SegmentId {
    pub fn new(doc_id: impl Into<String>, index: usize) -> Self {
        Self { doc_id: doc_id.into(), index }
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.index)
    }
}

impl FromStr for SegmentId {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (doc, k) = s
            .rsplit_once('#')
            .ok_or_else(|| CorpusError::InvalidSegmentId(s.to_string()))?;
        let index = k.parse().map_err(|_| CorpusError::InvalidSegmentId(s.to_string()))?;
        Ok(Self::new(doc, index))
    }
}

impl Serialize for SegmentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: String,
    pub segment_id: SegmentId,
    pub text: String,
    #[serde(default)]
    pub image_ids: Vec<String>,
    pub source_sections: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub max_tokens: usize,
    pub min_tokens: usize,
    /// Prepend `"heading:"` to the first chunk of each section.
    pub include_headings: bool,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self { max_tokens: 512, min_tokens: 64, include_headings: true }
    }
}

impl ChunkPolicy {
    pub fn new(max_tokens: usize, min_tokens: usize) -> Result<Self, CorpusError> {
        let policy = Self { max_tokens, min_tokens, ..Self::default() };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(CorpusError::InvalidPolicy(format!(
                "need max_tokens >= min_tokens >= 1, got max={} min={}",
                self.max_tokens, self.min_tokens
            )));
        }
        Ok(())
    }
}

/// A document line that failed to load.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReject {
    pub line: usize,
    pub reason: String,
}

/// Read-only view over a loaded corpus. Shareable across threads.
#[derive(Debug, Default, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    rejects: Vec<LoadReject>,
}

impl Corpus {
    /// Loads a line-delimited corpus file. Malformed documents are rejected
    /// with their line number and loading continues.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_reader(File::open(path)?)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<Document>(&line)
                .map_err(|e| e.to_string())
                .and_then(|doc| doc.validate().map(|_| doc));
            let result = parsed.and_then(|doc| corpus.insert(doc));
            if let Err(reason) = result {
                log::warn!("corpus line {lineno} rejected: {reason}");
                corpus.rejects.push(LoadReject { line: lineno, reason });
            }
        }
        Ok(corpus)
    }

    /// Builds a corpus from in-memory documents, rejecting invalid ones.
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Self {
        let mut corpus = Corpus::default();
        for (n, doc) in docs.into_iter().enumerate() {
            if let Err(reason) = doc.validate().and_then(|_| corpus.insert(doc)) {
                corpus.rejects.push(LoadReject { line: n + 1, reason });
            }
        }
        corpus
    }

    fn insert(&mut self, doc: Document) -> Result<(), String> {
        if self.by_id.contains_key(&doc.doc_id) {
            return Err(format!("duplicate doc_id: {}", doc.doc_id));
        }
        self.by_id.insert(doc.doc_id.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        for doc in &self.documents {
            serde_json::to_writer(&mut out, doc).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn rejects(&self) -> &[LoadReject] {
        &self.rejects
    }

    /// Segments every document; documents are processed in parallel and the
    /// output keeps corpus order.
    pub fn segment_all(&self, policy: &ChunkPolicy) -> Vec<Vec<Segment>> {
        self.documents
            .par_iter()
            .map(|doc| segment_document(doc, policy))
            .collect()
    }
}

/// Returns the assets referenced by `seg`, in reference order.
pub fn resolve_images(seg: &Segment, corpus: &Corpus) -> Result<Vec<ImageAsset>, CorpusError> {
    let doc = corpus
        .get(&seg.doc_id)
        .ok_or_else(|| CorpusError::UnknownDocument(seg.doc_id.clone()))?;
    seg.image_ids
        .iter()
        .map(|id| {
            doc.image(id)
                .cloned()
                .ok_or_else(|| CorpusError::DanglingImage(id.clone()))
        })
        .collect()
}

/// A sentence (or heading label) tagged with its section.
#[derive(Debug, Clone)]
struct Piece {
    section: usize,
    text: String,
    tokens: usize,
}

struct Unit {
    section: usize,
    pieces: Vec<Piece>,
    image_ids: Vec<String>,
}

impl Unit {
    fn tokens(&self) -> usize {
        self.pieces.iter().map(|p| p.tokens).sum()
    }
}

fn section_units(doc: &Document, policy: &ChunkPolicy) -> Vec<Unit> {
    doc.sections
        .iter()
        .enumerate()
        .map(|(i, section)| {
            let mut pieces = Vec::new();
            let heading = normalize_whitespace(&section.heading);
            if policy.include_headings && !heading.is_empty() {
                let text = format!("{heading}:");
                pieces.push(Piece { section: i, tokens: count_tokens(&text), text });
            }
            for sentence in split_sentences(&section.text) {
                pieces.push(Piece { section: i, tokens: count_tokens(&sentence), text: sentence });
            }
            Unit { section: i, pieces, image_ids: section.image_ids.clone() }
        })
        .collect()
}

/// Joins pieces: a space inside a section, a blank line between sections.
fn join_pieces(pieces: &[Piece]) -> String {
    let mut out = String::new();
    let mut last_section = None;
    for piece in pieces {
        match last_section {
            None => {}
            Some(s) if s == piece.section => out.push(' '),
            Some(_) => out.push_str("\n\n"),
        }
        out.push_str(&piece.text);
        last_section = Some(piece.section);
    }
    out
}

/// Splits `pieces` into runs of at most `max_tokens` tokens, breaking between
/// sentences and falling back to word windows for oversized sentences.
fn pack_pieces(pieces: Vec<Piece>, max_tokens: usize) -> Vec<Vec<Piece>> {
    let mut chunks = Vec::new();
    let mut current: Vec<Piece> = Vec::new();
    let mut current_tokens = 0;
    for piece in pieces {
        if piece.tokens > max_tokens {
            let words: Vec<&str> = piece.text.split_whitespace().collect();
            for window in words.chunks(max_tokens) {
                let part = Piece { section: piece.section, text: window.join(" "), tokens: window.len() };
                if current_tokens + part.tokens > max_tokens && !current.is_empty() {
                    chunks.push(std::mem::take(&mut current));
                    current_tokens = 0;
                }
                current_tokens += part.tokens;
                current.push(part);
            }
            continue;
        }
        if current_tokens + piece.tokens > max_tokens && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current_tokens += piece.tokens;
        current.push(piece);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Segments one document under `policy`. Pure function of its inputs.
pub fn segment_document(doc: &Document, policy: &ChunkPolicy) -> Vec<Segment> {
    let max_tokens = policy.max_tokens.max(1);
    let min_tokens = policy.min_tokens.clamp(1, max_tokens);

    let mut raw: Vec<(Vec<Piece>, Vec<String>)> = Vec::new();
    let mut pending: Vec<Unit> = Vec::new();
    let mut pending_tokens = 0;

    let flush = |pending: &mut Vec<Unit>, raw: &mut Vec<(Vec<Piece>, Vec<String>)>| {
        let pieces: Vec<Piece> = pending.drain(..).flat_map(|u| u.pieces).collect();
        if pieces.is_empty() {
            return;
        }
        let total: usize = pieces.iter().map(|p| p.tokens).sum();
        if total <= max_tokens {
            raw.push((pieces, Vec::new()));
        } else {
            raw.extend(pack_pieces(pieces, max_tokens).into_iter().map(|c| (c, Vec::new())));
        }
    };

    for unit in section_units(doc, policy) {
        if !unit.image_ids.is_empty() {
            flush(&mut pending, &mut raw);
            pending_tokens = 0;
            let mut pieces = unit.pieces;
            if pieces.is_empty() {
                pieces.push(Piece { section: unit.section, text: String::new(), tokens: 0 });
            }
            raw.push((pieces, unit.image_ids));
            continue;
        }
        let tokens = unit.tokens();
        if tokens == 0 {
            continue;
        }
        if !pending.is_empty() && pending_tokens + tokens > max_tokens && pending_tokens >= min_tokens {
            flush(&mut pending, &mut raw);
            pending_tokens = 0;
        }
        pending_tokens += tokens;
        pending.push(unit);
    }
    flush(&mut pending, &mut raw);

    raw.into_iter()
        .enumerate()
        .map(|(k, (pieces, image_ids))| {
            let source_sections: BTreeSet<usize> = pieces.iter().map(|p| p.section).collect();
            Segment {
                doc_id: doc.doc_id.clone(),
                segment_id: SegmentId::new(doc.doc_id.clone(), k),
                text: join_pieces(&pieces),
                image_ids,
                source_sections: source_sections.into_iter().collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(prefix: &str, n: usize) -> String {
        (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ")
    }

    fn doc(sections: Vec<Section>, images: &[&str]) -> Document {
        Document {
            doc_id: "d".into(),
            title: "T".into(),
            sections,
            images: images
                .iter()
                .map(|id| ImageAsset { image_id: id.to_string(), uri: format!("{id}.jpg"), caption: None })
                .collect(),
        }
    }

    fn section(text: String, images: &[&str]) -> Section {
        Section { heading: String::new(), text, image_ids: images.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn image_section_kept_whole() {
        let d = doc(vec![section(words("w", 3000), &["i1"])], &["i1"]);
        let segs = segment_document(&d, &ChunkPolicy::default());
        assert_eq!(segs.len(), 1);
        assert_eq!(count_tokens(&segs[0].text), 3000);
        assert_eq!(segs[0].image_ids, vec!["i1"]);
    }

    #[test]
    fn small_sections_merge() {
        let d = doc(vec![section(words("a", 100), &[]), section(words("b", 100), &[])], &[]);
        let segs = segment_document(&d, &ChunkPolicy::default());
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].source_sections, vec![0, 1]);
        assert_eq!(count_tokens(&segs[0].text), 200);
    }

    #[test]
    fn short_section_merges_forward_past_budget() {
        let policy = ChunkPolicy { max_tokens: 100, min_tokens: 20, include_headings: false };
        let first = "tiny bit here.".to_string();
        let second = (0..10).map(|i| format!("{} .", words(&format!("s{i}x"), 9))).collect::<Vec<_>>().join(" ");
        let d = doc(vec![section(first, &[]), section(second, &[])], &[]);
        let segs = segment_document(&d, &policy);
        assert!(segs[0].source_sections.contains(&0) && segs[0].source_sections.contains(&1));
        assert!(segs.iter().all(|s| count_tokens(&s.text) <= 100));
    }

    #[test]
    fn headings_prefix_section_text() {
        let mut s = section("Body text here.".into(), &[]);
        s.heading = "History".into();
        let segs = segment_document(&doc(vec![s], &[]), &ChunkPolicy::default());
        assert_eq!(segs[0].text, "History: Body text here.");
    }

    #[test]
    fn segment_ids_dense() {
        let policy = ChunkPolicy { max_tokens: 10, min_tokens: 1, include_headings: false };
        let d = doc(vec![section(words("x", 35), &[]), section("pic.".into(), &["i"])], &["i"]);
        let segs = segment_document(&d, &policy);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.segment_id.to_string(), format!("d#{k}"));
        }
        assert_eq!(segs.last().unwrap().image_ids, vec!["i"]);
    }

    #[test]
    fn empty_doc_yields_nothing() {
        assert!(segment_document(&doc(vec![], &[]), &ChunkPolicy::default()).is_empty());
    }

    #[test]
    fn loads_and_rejects() {
        let good = r#"{"doc_id":"a","title":"A","sections":[{"heading":"","text":"x","image_ids":["i1"]}],"images":[{"image_id":"i1","uri":"u"}]}"#;
        let dangling = r#"{"doc_id":"b","sections":[{"text":"x","image_ids":["imgX"]}],"images":[]}"#;
        let missing = r#"{"title":"no id"}"#;
        let input = format!("{good}\n{dangling}\nnot json\n{missing}\n");
        let corpus = Corpus::from_reader(input.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 1);
        let reasons: Vec<_> = corpus.rejects().iter().map(|r| (r.line, r.reason.clone())).collect();
        assert_eq!(reasons[0], (2, "dangling image ref: imgX".to_string()));
        assert_eq!(reasons[1].0, 3);
        assert!(reasons[2].1.contains("doc_id"));
    }

    #[test]
    fn empty_file_loads_nothing() {
        let corpus = Corpus::from_reader(&b""[..]).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.rejects().is_empty());
    }

    #[test]
    fn resolve_images_in_order_and_dangling() {
        let d = doc(vec![section("x".into(), &["i1", "i2"])], &["i2", "i1"]);
        let corpus = Corpus::from_documents(vec![d]);
        let segs = segment_document(corpus.get("d").unwrap(), &ChunkPolicy::default());
        let ids: Vec<_> = resolve_images(&segs[0], &corpus).unwrap().into_iter().map(|a| a.image_id).collect();
        assert_eq!(ids, vec!["i1", "i2"]);

        let mut plain = segs[0].clone();
        plain.image_ids.clear();
        assert!(resolve_images(&plain, &corpus).unwrap().is_empty());

        plain.image_ids = vec!["i9".into()];
        let err = resolve_images(&plain, &corpus).unwrap_err();
        assert_eq!(err.to_string(), "dangling image ref: i9");
    }

    #[test]
    fn segment_id_round_trips_with_hash_in_doc_id() {
        let id: SegmentId = "a#b#12".parse().unwrap();
        assert_eq!(id, SegmentId::new("a#b", 12));
        assert!("nohash".parse::<SegmentId>().is_err());
    }
}
