//! Multimodal knowledge graphs: textual fragments per segment, image regions
//! attached from vision-text matches, and the merge that aggregates
//! fragments into one graph per document.
//!
//! Every component of a node or edge is kept in a canonical order and merged
//! with set-like or max operations, so [`KgFragment::merge`] is idempotent,
//! commutative and associative.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SegmentId;
use crate::extraction::{MatchRecord, RecordBatch};
use crate::scenegraph::{bbox_union, BBox, VisualGraph};

#[derive(Debug, Error)]
pub enum KgError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed graph file: {0}")]
    Malformed(String),
    #[error("edge {0} references missing node {1}")]
    DanglingEdge(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Description {
    pub segment_id: SegmentId,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    WholeImage,
    Bbox(BBox),
}

impl Region {
    fn canonical_cmp(&self, other: &Region) -> Ordering {
        match (self, other) {
            (Region::WholeImage, Region::WholeImage) => Ordering::Equal,
            (Region::WholeImage, Region::Bbox(_)) => Ordering::Less,
            (Region::Bbox(_), Region::WholeImage) => Ordering::Greater,
            (Region::Bbox(a), Region::Bbox(b)) => a.total_cmp(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttachment {
    pub image_id: String,
    pub region: Region,
    pub strength: f64,
}

impl RegionAttachment {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.image_id.cmp(&other.image_id).then_with(|| self.region.canonical_cmp(&other.region))
    }
}

/// Adds `incoming` to `regions`; an existing (image, region) keeps the larger strength.
fn merge_regions(regions: &mut Vec<RegionAttachment>, incoming: impl IntoIterator<Item = RegionAttachment>) {
    for att in incoming {
        match regions.binary_search_by(|r| r.key_cmp(&att)) {
            Ok(i) => regions[i].strength = regions[i].strength.max(att.strength),
            Err(i) => regions.insert(i, att),
        }
    }
}

/// Sorts by `(segment, text)` and keeps one entry per distinct text: the one
/// from the smallest segment.
fn canonical_descriptions<T: Clone + Ord>(items: &mut Vec<T>, text: impl Fn(&T) -> &str) {
    items.sort_by(|a, b| text(a).cmp(text(b)).then_with(|| a.cmp(b)));
    items.dedup_by(|a, b| text(a) == text(b));
    items.sort();
}

fn merge_entity_type(current: &mut String, other: &str) {
    if current.is_empty() || (!other.is_empty() && other < current.as_str()) {
        *current = other.to_string();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMEntity {
    pub name: String,
    pub entity_type: String,
    pub descriptions: Vec<Description>,
    pub regions: Vec<RegionAttachment>,
    pub source_segments: BTreeSet<SegmentId>,
}

impl MMEntity {
    fn new(name: String) -> Self {
        Self {
            name,
            entity_type: String::new(),
            descriptions: Vec::new(),
            regions: Vec::new(),
            source_segments: BTreeSet::new(),
        }
    }

    fn merge(&mut self, other: &MMEntity) {
        merge_entity_type(&mut self.entity_type, &other.entity_type);
        self.descriptions.extend(other.descriptions.iter().cloned());
        canonical_descriptions(&mut self.descriptions, |d| &d.text);
        merge_regions(&mut self.regions, other.regions.iter().cloned());
        self.source_segments.extend(other.source_segments.iter().cloned());
    }

    /// Documents this entity was extracted from.
    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.source_segments.iter().map(|s| s.doc_id.as_str()).collect()
    }

    /// Descriptions joined by a space.
    pub fn description_text(&self) -> String {
        self.descriptions.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Unordered pair of canonical entity names, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[String; 2]", from = "[String; 2]")]
pub struct EdgeKey(String, String);

impl EdgeKey {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }

    pub fn endpoints(&self) -> (&str, &str) {
        (&self.0, &self.1)
    }

    pub fn other(&self, name: &str) -> Option<&str> {
        if self.0 == name {
            Some(&self.1)
        } else if self.1 == name {
            Some(&self.0)
        } else {
            None
        }
    }
}

impl From<[String; 2]> for EdgeKey {
    fn from([a, b]: [String; 2]) -> Self {
        EdgeKey::new(a, b)
    }
}

impl From<EdgeKey> for [String; 2] {
    fn from(k: EdgeKey) -> Self {
        [k.0, k.1]
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -- {}", self.0, self.1)
    }
}

/// Edge description with the orientation it was extracted in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeDescription {
    pub segment_id: SegmentId,
    pub text: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMEdge {
    pub endpoints: EdgeKey,
    pub descriptions: Vec<EdgeDescription>,
    pub strength: f64,
    pub regions: Vec<RegionAttachment>,
    pub source_segments: BTreeSet<SegmentId>,
}

impl MMEdge {
    fn merge(&mut self, other: &MMEdge) {
        self.descriptions.extend(other.descriptions.iter().cloned());
        canonical_descriptions(&mut self.descriptions, |d| &d.text);
        self.strength = self.strength.max(other.strength);
        merge_regions(&mut self.regions, other.regions.iter().cloned());
        self.source_segments.extend(other.source_segments.iter().cloned());
    }

    /// Display orientation: that of the first canonical description.
    pub fn oriented(&self) -> (&str, &str) {
        match self.descriptions.first() {
            Some(d) => (&d.source, &d.target),
            None => self.endpoints.endpoints(),
        }
    }

    pub fn description_text(&self) -> String {
        self.descriptions.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.source_segments.iter().map(|s| s.doc_id.as_str()).collect()
    }
}

/// Node and edge maps shared by per-segment fragments, per-document graphs
/// and query-time composed graphs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KgFragment {
    pub nodes: BTreeMap<String, MMEntity>,
    pub edges: BTreeMap<EdgeKey, MMEdge>,
}

impl KgFragment {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    /// Merges `other` into `self`: nodes by name, edges by endpoint pair.
    pub fn merge(&mut self, other: &KgFragment) {
        for (name, node) in &other.nodes {
            self.nodes
                .entry(name.clone())
                .or_insert_with(|| MMEntity::new(name.clone()))
                .merge(node);
        }
        for (key, edge) in &other.edges {
            match self.edges.get_mut(key) {
                Some(existing) => existing.merge(edge),
                None => {
                    let mut fresh = edge.clone();
                    canonical_descriptions(&mut fresh.descriptions, |d| &d.text);
                    self.edges.insert(key.clone(), fresh);
                }
            }
        }
    }

    /// Edges touching `name`.
    pub fn incident_edges<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a MMEdge> + 'a {
        self.edges.values().filter(move |e| e.endpoints.other(name).is_some())
    }

    /// Adjacency list keyed by node name.
    pub fn adjacency(&self) -> BTreeMap<&str, Vec<(&str, &EdgeKey)>> {
        let mut adj: BTreeMap<&str, Vec<(&str, &EdgeKey)>> = BTreeMap::new();
        for key in self.edges.keys() {
            let (a, b) = key.endpoints();
            adj.entry(a).or_default().push((b, key));
            adj.entry(b).or_default().push((a, key));
        }
        adj
    }

    pub fn check_integrity(&self) -> Result<(), KgError> {
        for key in self.edges.keys() {
            let (a, b) = key.endpoints();
            for end in [a, b] {
                if !self.nodes.contains_key(end) {
                    return Err(KgError::DanglingEdge(key.to_string(), end.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Fragment plus the number of relationships dropped for a missing endpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextualSubgraph {
    pub fragment: KgFragment,
    pub dangling: usize,
}

/// One node per distinct entity name and one edge per relationship whose
/// endpoints both appear among the batch's entities.
pub fn build_textual_subgraph(batch: &RecordBatch, segment_id: &SegmentId) -> TextualSubgraph {
    let mut fragment = KgFragment::default();
    for entity in &batch.entities {
        let mut node = MMEntity::new(entity.name.clone());
        node.entity_type = entity.entity_type.clone();
        if !entity.description.is_empty() {
            node.descriptions.push(Description { segment_id: segment_id.clone(), text: entity.description.clone() });
        }
        node.source_segments.insert(segment_id.clone());
        let mut single = KgFragment::default();
        single.nodes.insert(node.name.clone(), node);
        fragment.merge(&single);
    }
    let mut dangling = 0;
    for rel in &batch.relationships {
        if !fragment.nodes.contains_key(&rel.source) || !fragment.nodes.contains_key(&rel.target) {
            dangling += 1;
            continue;
        }
        let key = EdgeKey::new(rel.source.clone(), rel.target.clone());
        let mut descriptions = Vec::new();
        if !rel.description.is_empty() {
            descriptions.push(EdgeDescription {
                segment_id: segment_id.clone(),
                text: rel.description.clone(),
                source: rel.source.clone(),
                target: rel.target.clone(),
            });
        }
        let edge = MMEdge {
            endpoints: key.clone(),
            descriptions,
            strength: rel.strength,
            regions: Vec::new(),
            source_segments: BTreeSet::from([segment_id.clone()]),
        };
        let mut single = KgFragment::default();
        single.edges.insert(key, edge);
        fragment.merge(&single);
    }
    TextualSubgraph { fragment, dangling }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchReport {
    pub applied: usize,
    pub dropped: Vec<String>,
}

/// Attaches image regions named by `matches` to nodes and edges of `frag`.
/// Relation matches attach the union of the relation's two object boxes.
pub fn apply_matchings(frag: &mut KgFragment, matches: &[MatchRecord], vg: &VisualGraph) -> MatchReport {
    let mut report = MatchReport::default();
    for m in matches {
        let attach = |region: Region| RegionAttachment { image_id: vg.image_id.clone(), region, strength: m.strength() };
        let outcome = match m {
            MatchRecord::Image { entity, .. } => match frag.nodes.get_mut(entity) {
                Some(node) => {
                    merge_regions(&mut node.regions, [attach(Region::WholeImage)]);
                    Ok(())
                }
                None => Err(format!("unknown entity: {entity}")),
            },
            MatchRecord::Object { object_id, entity, .. } => match (vg.object(*object_id), frag.nodes.get_mut(entity)) {
                (None, _) => Err(format!("unknown object: {object_id}")),
                (_, None) => Err(format!("unknown entity: {entity}")),
                (Some(obj), Some(node)) => {
                    merge_regions(&mut node.regions, [attach(Region::Bbox(obj.bbox))]);
                    Ok(())
                }
            },
            MatchRecord::Relation { relation_id, source, target, .. } => {
                let key = EdgeKey::new(source.clone(), target.clone());
                let region = vg.relation(*relation_id).and_then(|rel| {
                    let subject = vg.object(rel.subject)?;
                    let object = vg.object(rel.object)?;
                    Some(bbox_union(&subject.bbox, &object.bbox))
                });
                match (region, frag.edges.get_mut(&key)) {
                    (None, _) => Err(format!("unknown relation: {relation_id}")),
                    (_, None) => Err(format!("unknown edge: {key}")),
                    (Some(bbox), Some(edge)) => {
                        merge_regions(&mut edge.regions, [attach(Region::Bbox(bbox))]);
                        Ok(())
                    }
                }
            }
        };
        match outcome {
            Ok(()) => report.applied += 1,
            Err(reason) => report.dropped.push(reason),
        }
    }
    report
}

/// The knowledge graph of one document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MultimodalKG {
    pub doc_id: String,
    pub graph: KgFragment,
}

#[derive(Serialize, Deserialize)]
struct KgFile {
    doc_id: String,
    nodes: Vec<MMEntity>,
    edges: Vec<MMEdge>,
}

impl MultimodalKG {
    /// Canonical JSON: nodes by name, edges by sorted endpoint pair.
    pub fn to_json(&self) -> String {
        let file = KgFile {
            doc_id: self.doc_id.clone(),
            nodes: self.graph.nodes.values().cloned().collect(),
            edges: self.graph.edges.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, KgError> {
        let file: KgFile = serde_json::from_str(raw).map_err(|e| KgError::Malformed(e.to_string()))?;
        let mut graph = KgFragment::default();
        for node in file.nodes {
            let mut single = KgFragment::default();
            single.nodes.insert(node.name.clone(), node);
            graph.merge(&single);
        }
        for edge in file.edges {
            let mut single = KgFragment::default();
            single.edges.insert(edge.endpoints.clone(), edge);
            graph.merge(&single);
        }
        graph.check_integrity()?;
        Ok(Self { doc_id: file.doc_id, graph })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KgError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| KgError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|source| KgError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&raw)
    }
}

/// Merges the fragments of one document. Result is independent of fragment order.
pub fn aggregate_document_graph<'a>(
    fragments: impl IntoIterator<Item = &'a KgFragment>,
    doc_id: &str,
) -> MultimodalKG {
    let mut graph = KgFragment::default();
    for frag in fragments {
        graph.merge(frag);
    }
    MultimodalKG { doc_id: doc_id.to_string(), graph }
}
