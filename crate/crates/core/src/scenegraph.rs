//! Visual graphs from an external scene-graph generator.
//!
//! Two sidecar encodings are accepted by [`ingest_scene_graph`]: a JSON
//! object (`objects[] {id, category, bbox[4]}`, `relations[] {id, subject,
//! predicate, object}`) and the line-oriented block produced by
//! [`render_scene_graph_block`].

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneGraphError {
    #[error("invalid bbox: {0}")]
    InvalidBBox(String),
    #[error("unreadable scene graph: {0}")]
    Unreadable(String),
    #[error("invalid element id: {0}")]
    InvalidId(String),
}

/// Normalized box `(x1, y1, x2, y2)`: top-left and bottom-right corners in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, SceneGraphError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(SceneGraphError::InvalidBBox("coordinate outside [0, 1]".into()));
        }
        if x1 > x2 {
            return Err(SceneGraphError::InvalidBBox("x1 > x2".into()));
        }
        if y1 > y2 {
            return Err(SceneGraphError::InvalidBBox("y1 > y2".into()));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Total order on coordinates, used for canonical region ordering.
    pub fn total_cmp(&self, other: &BBox) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = SceneGraphError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            format_coord(self.x1),
            format_coord(self.y1),
            format_coord(self.x2),
            format_coord(self.y2)
        )
    }
}

/// Rounds to two decimals and prints the shortest form with at least one
/// fractional digit: `0.3`, `0.64`, `1.0`.
fn format_coord(v: f64) -> String {
    let rounded = (v * 100.0).round() / 100.0;
    let s = format!("{rounded}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Smallest box containing both inputs.
pub fn bbox_union(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

macro_rules! element_id {
    ($name:ident, $label:literal) => {
        #[doc = concat!("`<", $label, "-k>`")]
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub usize);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!("<", $label, "-{}>"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = SceneGraphError;

            /// Accepts `<label-k>`, `label-k` and bare `k`.
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let t = s.trim();
                let t = t.strip_prefix('<').and_then(|t| t.strip_suffix('>')).unwrap_or(t);
                let t = t.strip_prefix(concat!($label, "-")).unwrap_or(t);
                t.parse()
                    .map($name)
                    .map_err(|_| SceneGraphError::InvalidId(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = serde_json::Value::deserialize(deserializer)?;
                let text = match raw {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    other => return Err(serde::de::Error::custom(format!("invalid id: {other}"))),
                };
                text.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

element_id!(ObjectId, "object");
element_id!(RelationId, "relation");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualObject {
    #[serde(rename = "id")]
    pub object_id: ObjectId,
    pub category: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualRelation {
    #[serde(rename = "id")]
    pub relation_id: RelationId,
    pub subject: ObjectId,
    pub predicate: String,
    pub object: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VisualGraph {
    #[serde(default)]
    pub image_id: String,
    #[serde(default)]
    pub objects: Vec<VisualObject>,
    #[serde(default)]
    pub relations: Vec<VisualRelation>,
}

impl VisualGraph {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self { image_id: image_id.into(), ..Self::default() }
    }

    pub fn object(&self, id: ObjectId) -> Option<&VisualObject> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn relation(&self, id: RelationId) -> Option<&VisualRelation> {
        self.relations.iter().find(|r| r.relation_id == id)
    }
}

/// Result of ingesting a sidecar: the valid graph plus one reason per dropped item.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub graph: VisualGraph,
    pub dropped: Vec<String>,
}

#[derive(Deserialize)]
struct RawGraph {
    #[serde(default)]
    objects: Vec<serde_json::Value>,
    #[serde(default)]
    relations: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct RawObject {
    id: serde_json::Value,
    category: String,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawRelation {
    id: serde_json::Value,
    subject: serde_json::Value,
    predicate: String,
    object: serde_json::Value,
}

fn value_id<T: FromStr<Err = SceneGraphError>>(v: &serde_json::Value) -> Result<T, SceneGraphError> {
    match v {
        serde_json::Value::String(s) => s.parse(),
        serde_json::Value::Number(n) => n.to_string().parse(),
        other => Err(SceneGraphError::InvalidId(other.to_string())),
    }
}

struct Builder {
    graph: VisualGraph,
    dropped: Vec<String>,
    object_ids: HashSet<ObjectId>,
    relation_ids: HashSet<RelationId>,
}

impl Builder {
    fn new(image_id: &str) -> Self {
        Self {
            graph: VisualGraph::empty(image_id),
            dropped: Vec::new(),
            object_ids: HashSet::new(),
            relation_ids: HashSet::new(),
        }
    }

    fn object(&mut self, label: &str, parsed: Result<(ObjectId, String, [f64; 4]), SceneGraphError>) {
        let (id, category, c) = match parsed {
            Ok(v) => v,
            Err(e) => return self.drop(label, e.to_string()),
        };
        let bbox = match BBox::new(c[0], c[1], c[2], c[3]) {
            Ok(b) => b,
            Err(SceneGraphError::InvalidBBox(reason)) => return self.drop(label, reason),
            Err(e) => return self.drop(label, e.to_string()),
        };
        if !self.object_ids.insert(id) {
            return self.drop(label, format!("duplicate object id {id}"));
        }
        self.graph.objects.push(VisualObject { object_id: id, category: category.trim().to_string(), bbox });
    }

    fn relation(
        &mut self,
        label: &str,
        parsed: Result<(RelationId, ObjectId, String, ObjectId), SceneGraphError>,
    ) {
        let (id, subject, predicate, object) = match parsed {
            Ok(v) => v,
            Err(e) => return self.drop(label, e.to_string()),
        };
        if subject == object {
            return self.drop(label, "subject equals object".into());
        }
        for end in [subject, object] {
            if !self.object_ids.contains(&end) {
                return self.drop(label, format!("unknown object {end}"));
            }
        }
        if !self.relation_ids.insert(id) {
            return self.drop(label, format!("duplicate relation id {id}"));
        }
        self.graph.relations.push(VisualRelation {
            relation_id: id,
            subject,
            predicate: predicate.trim().to_string(),
            object,
        });
    }

    fn drop(&mut self, label: &str, reason: String) {
        self.dropped.push(format!("{label}: {reason}"));
    }

    fn finish(self) -> IngestReport {
        IngestReport { graph: self.graph, dropped: self.dropped }
    }
}

/// Parses a scene-graph sidecar for `image_id`. Invalid objects and relations
/// are dropped with a reason; relations pointing at dropped objects go too.
pub fn ingest_scene_graph(raw: &str, image_id: &str) -> Result<IngestReport, SceneGraphError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(IngestReport { graph: VisualGraph::empty(image_id), dropped: Vec::new() });
    }
    if trimmed.starts_with('{') {
        ingest_json(trimmed, image_id)
    } else {
        ingest_block(trimmed, image_id)
    }
}

fn ingest_json(raw: &str, image_id: &str) -> Result<IngestReport, SceneGraphError> {
    let parsed: RawGraph =
        serde_json::from_str(raw).map_err(|e| SceneGraphError::Unreadable(e.to_string()))?;
    let mut b = Builder::new(image_id);
    for (i, value) in parsed.objects.into_iter().enumerate() {
        let label = format!("object #{i}");
        let obj = serde_json::from_value::<RawObject>(value)
            .map_err(|e| SceneGraphError::Unreadable(e.to_string()))
            .and_then(|o| Ok((value_id(&o.id)?, o.category, o.bbox)));
        b.object(&label, obj);
    }
    for (i, value) in parsed.relations.into_iter().enumerate() {
        let label = format!("relation #{i}");
        let rel = serde_json::from_value::<RawRelation>(value)
            .map_err(|e| SceneGraphError::Unreadable(e.to_string()))
            .and_then(|r| Ok((value_id(&r.id)?, value_id(&r.subject)?, r.predicate, value_id(&r.object)?)));
        b.relation(&label, rel);
    }
    Ok(b.finish())
}

/// Block lines: `- <object-k>: category, (x1, y1, x2, y2)` and
/// `- <relation-k>: <object-i> predicate <object-j>`.
fn ingest_block(raw: &str, image_id: &str) -> Result<IngestReport, SceneGraphError> {
    let mut b = Builder::new(image_id);
    let mut relation_lines = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        let line = line.trim();
        let Some(body) = line.strip_prefix('-').map(str::trim) else {
            continue;
        };
        let label = format!("line {}", n + 1);
        if body.starts_with("<object-") {
            b.object(&label, parse_object_line(body));
        } else if body.starts_with("<relation-") {
            relation_lines.push((label, body.to_string()));
        }
    }
    for (label, body) in relation_lines {
        b.relation(&label, parse_relation_line(&body));
    }
    Ok(b.finish())
}

fn parse_object_line(body: &str) -> Result<(ObjectId, String, [f64; 4]), SceneGraphError> {
    let bad = || SceneGraphError::Unreadable(body.to_string());
    let (id, rest) = body.split_once(':').ok_or_else(bad)?;
    let open = rest.rfind('(').ok_or_else(bad)?;
    let close = rest.rfind(')').ok_or_else(bad)?;
    if close < open {
        return Err(bad());
    }
    let category = rest[..open].trim().trim_end_matches(',').trim().to_string();
    let nums: Vec<f64> = rest[open + 1..close]
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let coords: [f64; 4] = nums.try_into().map_err(|_| bad())?;
    Ok((id.parse()?, category, coords))
}

fn parse_relation_line(body: &str) -> Result<(RelationId, ObjectId, String, ObjectId), SceneGraphError> {
    let bad = || SceneGraphError::Unreadable(body.to_string());
    let (id, rest) = body.split_once(':').ok_or_else(bad)?;
    let rest = rest.trim();
    let subject_end = rest.find('>').ok_or_else(bad)?;
    let object_start = rest.rfind('<').ok_or_else(bad)?;
    if object_start <= subject_end {
        return Err(bad());
    }
    let subject = &rest[..=subject_end];
    let predicate = rest[subject_end + 1..object_start].trim().to_string();
    let object = &rest[object_start..];
    Ok((id.parse()?, subject.parse()?, predicate, object.parse()?))
}

/// Renders the graph in the prompt layout, one line per object then one per
/// relation, without a trailing newline.
pub fn render_scene_graph_block(vg: &VisualGraph) -> String {
    let objects = vg
        .objects
        .iter()
        .map(|o| format!("- {}: {}, {}", o.object_id, o.category, o.bbox));
    let relations = vg
        .relations
        .iter()
        .map(|r| format!("- {}: {} {} {}", r.relation_id, r.subject, r.predicate, r.object));
    objects.chain(relations).collect::<Vec<_>>().join("\n")
}
