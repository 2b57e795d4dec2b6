//! Delimiter-record grammar spoken by extraction and matching backends, and
//! the prompts that elicit it.
//!
//! One record per line, fields separated by `|`, framed by parentheses, with
//! a quoted tag as first field:
//!
//! ```text
//! ("entity"|MOUNT FUJI|location|An active stratovolcano.)
//! ("relationship"|MOUNT FUJI|HONSHU ISLAND|Located on the island.|9)
//! ("matching"|<image>|MOUNT FUJI|8)
//! ("matching"|<object-3>|MOUNT FUJI|9)
//! ("matching"|<relation-2>|MOUNT FUJI|SHINKANSEN|7)
//! ```
//!
//! Tags may be quoted with plain or typographic quotes (``` ``entity'' ```);
//! `relation` is read as `relationship` and `mapping` as `matching`. Inside a
//! field, `\|`, `\\`, `\n` and `\r` are escapes. The parser never fails:
//! lines without a known frame are ignored and malformed records are kept in
//! [`RecordBatch::rejects`] with a reason.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatRequest, Part};
use crate::corpus::ImageAsset;
use crate::scenegraph::{render_scene_graph_block, ObjectId, RelationId, VisualGraph};

pub const EXTRACT_TEMPLATE: &str = "extract";
pub const MATCH_TEMPLATE: &str = "match";
pub const ANSWER_TEMPLATE: &str = "answer";
pub const REFORMULATE_TEMPLATE: &str = "reformulate";

pub const MAX_STRENGTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("empty question")]
    EmptyQuestion,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("template {0}: {1}")]
    Template(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualEntity {
    pub name: String,
    pub entity_type: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualRelationship {
    pub source: String,
    pub target: String,
    pub description: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchRecord {
    Image { entity: String, strength: f64 },
    Object { object_id: ObjectId, entity: String, strength: f64 },
    Relation { relation_id: RelationId, source: String, target: String, strength: f64 },
}

impl MatchRecord {
    pub fn strength(&self) -> f64 {
        match self {
            MatchRecord::Image { strength, .. }
            | MatchRecord::Object { strength, .. }
            | MatchRecord::Relation { strength, .. } => *strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub raw_line: String,
    pub reason: String,
}

/// A relationship kept in the batch although one endpoint has no entity record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DanglingEndpoint {
    pub relationship: usize,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordBatch {
    pub entities: Vec<TextualEntity>,
    pub relationships: Vec<TextualRelationship>,
    pub matches: Vec<MatchRecord>,
    pub rejects: Vec<Reject>,
    pub dangling: Vec<DanglingEndpoint>,
}

impl RecordBatch {
    /// True when the parsed records (ignoring rejects and flags) are equal.
    pub fn same_records(&self, other: &RecordBatch) -> bool {
        self.entities == other.entities && self.relationships == other.relationships && self.matches == other.matches
    }
}

/// Entities and relationships of one text segment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextualGraph {
    pub entities: Vec<TextualEntity>,
    pub relationships: Vec<TextualRelationship>,
}

impl From<&RecordBatch> for TextualGraph {
    fn from(batch: &RecordBatch) -> Self {
        Self { entities: batch.entities.clone(), relationships: batch.relationships.clone() }
    }
}

/// Trim and uppercase.
pub fn canonical_name(name: &str) -> String {
    name.trim().to_uppercase()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tag {
    Entity,
    Relationship,
    Matching,
}

fn classify_tag(field: &str) -> Option<Tag> {
    let quotes: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];
    match field.trim().trim_matches(quotes).trim().to_lowercase().as_str() {
        "entity" => Some(Tag::Entity),
        "relationship" | "relation" => Some(Tag::Relationship),
        "matching" | "mapping" => Some(Tag::Matching),
        _ => None,
    }
}

/// Splits on unescaped `|`, resolving escapes. Each field is trimmed.
fn split_fields(body: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('n') => current.push('\n'),
                Some('r') => current.push('\r'),
                Some(other) => current.push(other),
                None => current.push('\\'),
            },
            '|' => fields.push(std::mem::take(&mut current)),
            _ => current.push(c),
        }
    }
    fields.push(current);
    fields.into_iter().map(|f| f.trim().to_string()).collect()
}

fn escape_field(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn parse_strength(field: &str) -> Result<f64, &'static str> {
    let value: f64 = field.trim().parse().map_err(|_| "invalid strength")?;
    if !value.is_finite() {
        return Err("invalid strength");
    }
    if !(0.0..=MAX_STRENGTH).contains(&value) {
        return Err("strength out of range");
    }
    Ok(value)
}

fn required_name(field: &str) -> Result<String, &'static str> {
    let name = canonical_name(field);
    if name.is_empty() {
        Err("empty entity name")
    } else {
        Ok(name)
    }
}

enum Parsed {
    Entity(TextualEntity),
    Relationship(TextualRelationship),
    Match(MatchRecord),
}

fn parse_frame(tag: Tag, fields: &[String]) -> Result<Parsed, &'static str> {
    match tag {
        Tag::Entity => {
            let [name, entity_type, description] = fields else {
                return Err("wrong field count");
            };
            Ok(Parsed::Entity(TextualEntity {
                name: required_name(name)?,
                entity_type: entity_type.clone(),
                description: description.clone(),
            }))
        }
        Tag::Relationship => {
            // A keywords field before the strength is tolerated and discarded.
            let (source, target, description, strength) = match fields {
                [s, t, d, st] | [s, t, d, _, st] => (s, t, d, st),
                _ => return Err("wrong field count"),
            };
            let source = required_name(source)?;
            let target = required_name(target)?;
            if source == target {
                return Err("source equals target");
            }
            Ok(Parsed::Relationship(TextualRelationship {
                source,
                target,
                description: description.clone(),
                strength: parse_strength(strength)?,
            }))
        }
        Tag::Matching => {
            let id = fields.first().ok_or("wrong field count")?;
            let bare = id.trim().trim_start_matches('<').trim_end_matches('>').to_lowercase();
            let record = if bare == "image" {
                let [_, entity, strength] = fields else {
                    return Err("wrong field count");
                };
                MatchRecord::Image { entity: required_name(entity)?, strength: parse_strength(strength)? }
            } else if bare.starts_with("object-") {
                let [_, entity, strength] = fields else {
                    return Err("wrong field count");
                };
                MatchRecord::Object {
                    object_id: id.parse().map_err(|_| "invalid match id")?,
                    entity: required_name(entity)?,
                    strength: parse_strength(strength)?,
                }
            } else if bare.starts_with("relation-") {
                let [_, source, target, strength] = fields else {
                    return Err("wrong field count");
                };
                MatchRecord::Relation {
                    relation_id: id.parse().map_err(|_| "invalid match id")?,
                    source: required_name(source)?,
                    target: required_name(target)?,
                    strength: parse_strength(strength)?,
                }
            } else {
                return Err("invalid match id");
            };
            Ok(Parsed::Match(record))
        }
    }
}

/// Parses every framed record in `raw`. Total over all inputs.
pub fn parse_records(raw: &str) -> RecordBatch {
    let mut batch = RecordBatch::default();
    for line in raw.split('\n') {
        let trimmed = line.trim();
        let (Some(open), Some(close)) = (trimmed.find('('), trimmed.rfind(')')) else {
            continue;
        };
        if close <= open {
            continue;
        }
        let fields = split_fields(&trimmed[open + 1..close]);
        let Some(tag) = classify_tag(&fields[0]) else {
            continue;
        };
        match parse_frame(tag, &fields[1..]) {
            Ok(Parsed::Entity(e)) => batch.entities.push(e),
            Ok(Parsed::Relationship(r)) => batch.relationships.push(r),
            Ok(Parsed::Match(m)) => batch.matches.push(m),
            Err(reason) => batch.rejects.push(Reject { raw_line: trimmed.to_string(), reason: reason.to_string() }),
        }
    }
    let names: HashSet<&str> = batch.entities.iter().map(|e| e.name.as_str()).collect();
    for (i, rel) in batch.relationships.iter().enumerate() {
        for end in [&rel.source, &rel.target] {
            if !names.contains(end.as_str()) {
                batch.dangling.push(DanglingEndpoint { relationship: i, name: end.clone() });
            }
        }
    }
    batch
}

/// Lossy UTF-8 front end to [`parse_records`].
pub fn parse_records_bytes(raw: &[u8]) -> RecordBatch {
    parse_records(&String::from_utf8_lossy(raw))
}

fn entity_line(e: &TextualEntity) -> String {
    format!("(\"entity\"|{}|{}|{})", escape_field(&e.name), escape_field(&e.entity_type), escape_field(&e.description))
}

fn relationship_line(r: &TextualRelationship) -> String {
    format!(
        "(\"relationship\"|{}|{}|{}|{})",
        escape_field(&r.source),
        escape_field(&r.target),
        escape_field(&r.description),
        r.strength
    )
}

fn match_line(m: &MatchRecord) -> String {
    match m {
        MatchRecord::Image { entity, strength } => format!("(\"matching\"|<image>|{}|{strength})", escape_field(entity)),
        MatchRecord::Object { object_id, entity, strength } => {
            format!("(\"matching\"|{object_id}|{}|{strength})", escape_field(entity))
        }
        MatchRecord::Relation { relation_id, source, target, strength } => format!(
            "(\"matching\"|{relation_id}|{}|{}|{strength})",
            escape_field(source),
            escape_field(target)
        ),
    }
}

/// Writes entities, then relationships, then matches, one record per line.
pub fn serialize_records(batch: &RecordBatch) -> String {
    batch
        .entities
        .iter()
        .map(entity_line)
        .chain(batch.relationships.iter().map(relationship_line))
        .chain(batch.matches.iter().map(match_line))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Record lines for a textual graph, as shown to the matcher.
pub fn serialize_textual_graph(tg: &TextualGraph) -> String {
    tg.entities
        .iter()
        .map(entity_line)
        .chain(tg.relationships.iter().map(relationship_line))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Plain-text prompt layout with `{NAME}` placeholders. `{IMAGE}` marks where
/// the image part goes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }

    /// Substitutes `vars` in one pass over the template (inserted values are
    /// never re-scanned) and splits at `{IMAGE}`. Unknown placeholders are
    /// left verbatim. Empty text parts are dropped.
    pub fn render(&self, vars: &[(&str, &str)], image: Option<&str>) -> Vec<Part> {
        let mut parts = Vec::new();
        let mut current = String::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            current.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let name = after.find('}').map(|close| &after[..close]);
            match name {
                Some("IMAGE") => {
                    if let Some(id) = image {
                        if !current.trim().is_empty() {
                            parts.push(Part::Text(std::mem::take(&mut current)));
                        }
                        current.clear();
                        parts.push(Part::Image(id.to_string()));
                    }
                    rest = &after["IMAGE".len() + 1..];
                    if image.is_some() {
                        rest = rest.strip_prefix('\n').unwrap_or(rest);
                    }
                }
                Some(name) if vars.iter().any(|(k, _)| *k == name) => {
                    let value = vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).unwrap_or_default();
                    current.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                _ => {
                    current.push('{');
                    rest = after;
                }
            }
        }
        current.push_str(rest);
        if !current.trim().is_empty() {
            parts.push(Part::Text(current));
        }
        parts
    }
}

/// The prompt files used by the engine. Defaults are compiled in; a
/// directory of `<name>.txt` files overrides them one by one.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub extract: PromptTemplate,
    pub match_prefix: String,
    pub matching: PromptTemplate,
    pub answer: PromptTemplate,
    pub reformulate: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            extract: PromptTemplate::new(EXTRACT_TEMPLATE, include_str!("../templates/extract.txt")),
            match_prefix: include_str!("../templates/match_prefix.txt").trim_end().to_string(),
            matching: PromptTemplate::new(MATCH_TEMPLATE, include_str!("../templates/match.txt")),
            answer: PromptTemplate::new(ANSWER_TEMPLATE, include_str!("../templates/answer.txt")),
            reformulate: PromptTemplate::new(REFORMULATE_TEMPLATE, include_str!("../templates/reformulate.txt")),
        }
    }
}

impl PromptSet {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ExtractionError> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        let read = |name: &str| -> Result<Option<String>, ExtractionError> {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => Ok(Some(text)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(ExtractionError::Template(name.to_string(), e.to_string())),
            }
        };
        if let Some(t) = read("extract")? {
            set.extract.text = t;
        }
        if let Some(t) = read("match_prefix")? {
            set.match_prefix = t.trim_end().to_string();
        }
        if let Some(t) = read("match")? {
            set.matching.text = t;
        }
        if let Some(t) = read("answer")? {
            set.answer.text = t;
        }
        if let Some(t) = read("reformulate")? {
            set.reformulate.text = t;
        }
        Ok(set)
    }
}

/// A rendered prompt ready to be sent as a [`ChatRequest`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParts {
    pub template_id: String,
    pub parts: Vec<Part>,
}

impl PromptParts {
    pub fn into_request(self, seed: u64) -> ChatRequest {
        ChatRequest::new(self.template_id, self.parts).with_seed(seed)
    }

    /// All text parts concatenated, for inspection.
    pub fn text(&self) -> String {
        self.parts.iter().filter_map(Part::as_text).collect::<Vec<_>>().join("")
    }
}

pub fn render_extraction_prompt(segment_text: &str, prompts: &PromptSet) -> PromptParts {
    PromptParts {
        template_id: prompts.extract.id.clone(),
        parts: prompts.extract.render(&[("TEXT", segment_text)], None),
    }
}

/// Matching prompt: instruction, the original image, textual records, the
/// scene-graph block, then in-context exemplars.
pub fn render_matching_prompt(
    image: &ImageAsset,
    tg: &TextualGraph,
    vg: &VisualGraph,
    exemplars: &[String],
    prompts: &PromptSet,
) -> PromptParts {
    let text_graph = serialize_textual_graph(tg);
    let scene_graph = render_scene_graph_block(vg);
    let exemplars = exemplars.join("\n\n");
    let vars = [
        ("PREFIX", prompts.match_prefix.as_str()),
        ("TEXT_GRAPH", text_graph.as_str()),
        ("SCENE_GRAPH", scene_graph.as_str()),
        ("EXEMPLARS", exemplars.as_str()),
    ];
    PromptParts {
        template_id: prompts.matching.id.clone(),
        parts: prompts.matching.render(&vars, Some(&image.image_id)),
    }
}

/// Asks the backend to restate `question` declaratively; returns the trimmed reply.
pub fn reformulate_question(
    question: &str,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
) -> Result<String, ExtractionError> {
    if question.trim().is_empty() {
        return Err(ExtractionError::EmptyQuestion);
    }
    let parts = prompts.reformulate.render(&[("QUESTION", question.trim())], None);
    let reply = backend.chat_complete(&ChatRequest::new(prompts.reformulate.id.clone(), parts))?;
    Ok(reply.trim().to_string())
}
