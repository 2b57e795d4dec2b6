//! Query-time retrieval: document recall, per-query graph composition,
//! pooled entity/edge scoring, relevance-filtered breadth-first expansion and
//! context assembly.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbedRole, EmbeddingBackend, EmbeddingRequest, Part};
use crate::corpus::{Document, Segment, SegmentId};
use crate::fusion::{EdgeKey, KgError, KgFragment, MMEdge, MMEntity, MultimodalKG};
use crate::index::{hit_order, IndexError, ItemKind, ScoredHit, VectorIndex};
use crate::text::count_tokens;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty question")]
    EmptyQuestion,
    #[error("document index is empty")]
    EmptyIndex,
    #[error("missing knowledge graph for document {0}")]
    MissingGraph(String),
    #[error("knowledge graph for document {doc}: {source}")]
    Graph { doc: String, source: KgError },
    #[error("budget below seed outline")]
    BudgetBelowSeeds,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub question: String,
    #[serde(default)]
    pub image_id: Option<String>,
}

impl Query {
    pub fn new(question: impl Into<String>, image_id: Option<String>) -> Result<Self, RetrievalError> {
        let q = Self { question: question.into(), image_id };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.question.trim().is_empty() {
            return Err(RetrievalError::EmptyQuestion);
        }
        Ok(())
    }

    pub fn parts(&self) -> Vec<Part> {
        let mut parts = vec![Part::text(self.question.clone())];
        parts.extend(self.image_id.iter().map(|id| Part::image(id.clone())));
        parts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_d: usize,
    pub k_g: usize,
    pub hops: usize,
    pub rho: f64,
    pub budget: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k_d: 10, k_g: 10, hops: 1, rho: 0.9, budget: 4096 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::Config(m.to_string()));
        if self.k_d == 0 {
            return bad("k_d must be at least 1");
        }
        if self.k_g == 0 {
            return bad("k_g must be at least 1");
        }
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad("rho must be a non-negative number");
        }
        Ok(())
    }
}

/// Embeds with `role` and rounds through `f32` so fresh vectors score
/// exactly like vectors read back from an index.
pub fn embed_parts(embedder: &dyn EmbeddingBackend, role: EmbedRole, parts: Vec<Part>) -> Result<Vec<f64>, BackendError> {
    let v = embedder.embed(&EmbeddingRequest::new(role, parts))?;
    Ok(v.values().iter().map(|&x| x as f32 as f64).collect())
}

pub fn embed_query(embedder: &dyn EmbeddingBackend, query: &Query) -> Result<Vec<f64>, RetrievalError> {
    query.validate()?;
    Ok(embed_parts(embedder, EmbedRole::Query, query.parts())?)
}

fn region_image_parts<'a>(regions: impl Iterator<Item = &'a crate::fusion::RegionAttachment>) -> Vec<Part> {
    let ids: BTreeSet<&str> = regions.map(|r| r.image_id.as_str()).collect();
    ids.into_iter().map(Part::image).collect()
}

/// Document content: title, full text and image references.
pub fn document_parts(doc: &Document) -> Vec<Part> {
    let mut parts = vec![Part::text(format!("{}\n{}", doc.title, doc.full_text()))];
    parts.extend(doc.images.iter().map(|i| Part::image(i.image_id.clone())));
    parts
}

pub fn segment_parts(seg: &Segment) -> Vec<Part> {
    let mut parts = vec![Part::text(seg.text.clone())];
    parts.extend(seg.image_ids.iter().map(|i| Part::image(i.clone())));
    parts
}

/// Entity content: name, type, descriptions and region image references.
pub fn entity_parts(node: &MMEntity) -> Vec<Part> {
    let mut parts = vec![Part::text(format!("{} {} {}", node.name, node.entity_type, node.description_text()))];
    parts.extend(region_image_parts(node.regions.iter()));
    parts
}

/// Edge content: endpoint names, descriptions and region image references.
pub fn edge_parts(edge: &MMEdge) -> Vec<Part> {
    let (a, b) = edge.endpoints.endpoints();
    let mut parts = vec![Part::text(format!("{a} {b} {}", edge.description_text()))];
    parts.extend(region_image_parts(edge.regions.iter()));
    parts
}

/// A node or an edge of a graph. Entities order before edges.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum ElementId {
    Entity(String),
    Edge(EdgeKey),
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementId::Entity(n) => f.write_str(n),
            ElementId::Edge(k) => write!(f, "{k}"),
        }
    }
}

impl ElementId {
    pub fn edge(a: &str, b: &str) -> Self {
        ElementId::Edge(EdgeKey::new(a, b))
    }

    pub fn kind(&self) -> ItemKind {
        match self {
            ElementId::Entity(_) => ItemKind::Entity,
            ElementId::Edge(_) => ItemKind::Edge,
        }
    }

    /// Index item id of this element within one document's graph.
    pub fn item_id(&self, doc_id: &str) -> String {
        match self {
            ElementId::Entity(n) => format!("{doc_id}\t{n}"),
            ElementId::Edge(k) => {
                let (a, b) = k.endpoints();
                format!("{doc_id}\t{a}\t{b}")
            }
        }
    }

    pub fn exists_in(&self, g: &KgFragment) -> bool {
        match self {
            ElementId::Entity(n) => g.nodes.contains_key(n),
            ElementId::Edge(k) => g.edges.contains_key(k),
        }
    }

    pub fn source_segments<'a>(&self, g: &'a KgFragment) -> Option<&'a BTreeSet<SegmentId>> {
        match self {
            ElementId::Entity(n) => g.nodes.get(n).map(|x| &x.source_segments),
            ElementId::Edge(k) => g.edges.get(k).map(|x| &x.source_segments),
        }
    }
}

/// Score descending, then element id ascending.
pub fn element_order(a: &(ElementId, f64), b: &(ElementId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Source of per-document graphs: a directory of `<doc_id>.json` files or memory.
#[derive(Debug, Clone)]
pub enum KgStore {
    Dir(PathBuf),
    Memory(BTreeMap<String, Arc<MultimodalKG>>),
}

impl KgStore {
    pub fn from_graphs(graphs: impl IntoIterator<Item = MultimodalKG>) -> Self {
        KgStore::Memory(graphs.into_iter().map(|g| (g.doc_id.clone(), Arc::new(g))).collect())
    }

    pub fn load(&self, doc_id: &str) -> Result<Arc<MultimodalKG>, RetrievalError> {
        match self {
            KgStore::Memory(m) => m.get(doc_id).cloned().ok_or_else(|| RetrievalError::MissingGraph(doc_id.to_string())),
            KgStore::Dir(dir) => {
                let path = dir.join(format!("{doc_id}.json"));
                if !path.is_file() {
                    return Err(RetrievalError::MissingGraph(doc_id.to_string()));
                }
                MultimodalKG::load(&path)
                    .map(Arc::new)
                    .map_err(|source| RetrievalError::Graph { doc: doc_id.to_string(), source })
            }
        }
    }
}

/// Merged graph over the candidate documents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComposedGraph {
    pub doc_ids: BTreeSet<String>,
    pub graph: KgFragment,
}

impl ComposedGraph {
    /// Candidate documents an element was extracted from.
    pub fn provenance(&self, element: &ElementId) -> BTreeSet<String> {
        element
            .source_segments(&self.graph)
            .map(|s| s.iter().map(|x| x.doc_id.clone()).collect())
            .unwrap_or_default()
    }

    pub fn canonical_json(&self) -> String {
        MultimodalKG { doc_id: self.doc_ids.iter().cloned().collect::<Vec<_>>().join(","), graph: self.graph.clone() }.to_json()
    }

    pub fn elements(&self) -> impl Iterator<Item = ElementId> + '_ {
        self.graph
            .nodes
            .keys()
            .map(|n| ElementId::Entity(n.clone()))
            .chain(self.graph.edges.keys().map(|k| ElementId::Edge(k.clone())))
    }
}

/// Top-`k_d` documents by cosine against the stored document vectors.
pub fn retrieve_documents(query_vec: &[f64], index: &VectorIndex, k_d: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
    if index.len_kind(ItemKind::Document) == 0 {
        return Err(RetrievalError::EmptyIndex);
    }
    Ok(index.search_topk(query_vec, ItemKind::Document, k_d)?)
}

/// Merges the graphs of `doc_ids`, treated as a set.
pub fn compose_query_graph<S: AsRef<str>>(store: &KgStore, doc_ids: &[S]) -> Result<ComposedGraph, RetrievalError> {
    let ids: BTreeSet<String> = doc_ids.iter().map(|d| d.as_ref().to_string()).collect();
    let mut graph = KgFragment::default();
    for id in &ids {
        graph.merge(&store.load(id)?.graph);
    }
    Ok(ComposedGraph { doc_ids: ids, graph })
}

/// Scores every element of `g` against the query, best first.
///
/// Elements coming from a single candidate document reuse that document's
/// indexed vector when present; merged elements are embedded afresh.
pub fn score_elements(
    query_vec: &[f64],
    g: &ComposedGraph,
    embedder: &dyn EmbeddingBackend,
    index: Option<&VectorIndex>,
) -> Result<Vec<(ElementId, f64)>, RetrievalError> {
    let elements: Vec<ElementId> = g.elements().collect();
    let mut scored = elements
        .into_par_iter()
        .map(|el| {
            let docs = g.provenance(&el);
            if let (Some(idx), 1) = (index, docs.len()) {
                let doc = docs.iter().next().unwrap();
                if let Some(s) = idx.score(query_vec, el.kind(), &el.item_id(doc))? {
                    return Ok((el, s));
                }
            }
            let parts = match &el {
                ElementId::Entity(n) => entity_parts(&g.graph.nodes[n]),
                ElementId::Edge(k) => edge_parts(&g.graph.edges[k]),
            };
            let v = embed_parts(embedder, EmbedRole::Evidence, parts)?;
            let s = crate::index::cosine_similarity(query_vec, &v)?;
            Ok((el, s))
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    scored.sort_by(element_order);
    Ok(scored)
}

/// The first `k_g` of a best-first ranking.
pub fn select_seeds(ranked: &[(ElementId, f64)], k_g: usize) -> Vec<(ElementId, f64)> {
    ranked.iter().take(k_g).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedElement {
    pub element: ElementId,
    pub hop: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSubgraph {
    pub seeds: Vec<(ElementId, f64)>,
    /// Seeds and admitted neighbors, by hop then score descending then id.
    pub expansion: Vec<ExpandedElement>,
    pub hops: usize,
}

impl RetrievedSubgraph {
    pub fn elements(&self) -> impl Iterator<Item = &ElementId> {
        self.expansion.iter().map(|e| &e.element)
    }

    pub fn contains(&self, el: &ElementId) -> bool {
        self.elements().any(|e| e == el)
    }
}

/// Breadth-first expansion from `seeds` for `hops` rounds.
///
/// The starting frontier is the seed entities plus both endpoints of each
/// seed edge. From a frontier node `u`, a neighbor `v` is admitted when
/// `rho == 0` or `score(v) >= rho * s_min` (`s_min` = lowest seed score);
/// the edge `u - v` is added whenever `v` is admitted or already retained.
/// Endpoints of seed edges join the result at hop 0 once `hops >= 1`.
pub fn expand_subgraph(
    g: &KgFragment,
    seeds: &[(ElementId, f64)],
    hops: usize,
    rho: f64,
    scores: &HashMap<ElementId, f64>,
) -> RetrievedSubgraph {
    let mut out: BTreeMap<ElementId, (usize, f64)> = seeds.iter().map(|(e, s)| (e.clone(), (0, *s))).collect();
    let score_of = |el: &ElementId| scores.get(el).copied().unwrap_or(f64::NEG_INFINITY);
    if hops > 0 {
        let s_min = seeds.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
        let admits = |s: f64| rho == 0.0 || s >= rho * s_min;
        let adj = g.adjacency();

        let mut frontier: Vec<String> = Vec::new();
        for (el, _) in seeds {
            match el {
                ElementId::Entity(n) => frontier.push(n.clone()),
                ElementId::Edge(k) => {
                    let (a, b) = k.endpoints();
                    frontier.extend([a.to_string(), b.to_string()]);
                }
            }
        }
        frontier.retain(|n| g.nodes.contains_key(n));
        frontier.sort();
        frontier.dedup();
        for n in &frontier {
            let el = ElementId::Entity(n.clone());
            let s = score_of(&el);
            out.entry(el).or_insert((0, s));
        }
        let mut visited: BTreeSet<String> = frontier.iter().cloned().collect();
        let by_score = |names: &mut Vec<String>| {
            names.sort_by(|a, b| {
                let (sa, sb) = (score_of(&ElementId::Entity(a.clone())), score_of(&ElementId::Entity(b.clone())));
                sb.total_cmp(&sa).then_with(|| a.cmp(b))
            })
        };
        by_score(&mut frontier);
        let mut queue: VecDeque<Vec<String>> = VecDeque::from([frontier]);
        for hop in 1..=hops {
            let Some(current) = queue.pop_front() else { break };
            let mut next = Vec::new();
            for u in &current {
                let mut neighbors: Vec<(&str, &EdgeKey)> = adj.get(u.as_str()).cloned().unwrap_or_default();
                neighbors.sort_by(|a, b| {
                    let (sa, sb) = (score_of(&ElementId::Entity(a.0.into())), score_of(&ElementId::Entity(b.0.into())));
                    sb.total_cmp(&sa).then_with(|| a.0.cmp(b.0))
                });
                for (v, key) in neighbors {
                    let v_el = ElementId::Entity(v.to_string());
                    let retained = visited.contains(v);
                    let v_score = score_of(&v_el);
                    if !retained && !admits(v_score) {
                        continue;
                    }
                    if !retained {
                        visited.insert(v.to_string());
                        out.insert(v_el, (hop, v_score));
                        next.push(v.to_string());
                    }
                    let e_el = ElementId::Edge(key.clone());
                    let e_score = score_of(&e_el);
                    out.entry(e_el).or_insert((hop, e_score));
                }
            }
            if next.is_empty() {
                break;
            }
            by_score(&mut next);
            queue.push_back(next);
        }
    }
    let mut expansion: Vec<ExpandedElement> =
        out.into_iter().map(|(element, (hop, score))| ExpandedElement { element, hop, score }).collect();
    expansion.sort_by(|a, b| {
        a.hop.cmp(&b.hop).then_with(|| b.score.total_cmp(&a.score)).then_with(|| a.element.cmp(&b.element))
    });
    RetrievedSubgraph { seeds: seeds.to_vec(), expansion, hops }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledContext {
    pub graph_block: String,
    pub segment_block: String,
    /// Elements whose lines made it into the graph block.
    pub elements: Vec<ElementId>,
    pub segments: Vec<SegmentId>,
    pub token_count: usize,
}

impl AssembledContext {
    pub fn is_empty(&self) -> bool {
        self.graph_block.is_empty() && self.segment_block.is_empty()
    }

    pub fn render(&self) -> String {
        match (self.graph_block.is_empty(), self.segment_block.is_empty()) {
            (false, false) => format!("{}\n\n{}", self.graph_block, self.segment_block),
            (false, true) => self.graph_block.clone(),
            _ => self.segment_block.clone(),
        }
    }
}

pub fn entity_line(node: &MMEntity) -> String {
    let desc = node.description_text();
    if node.entity_type.is_empty() {
        format!("{}: {desc}", node.name)
    } else {
        format!("{} ({}): {desc}", node.name, node.entity_type)
    }
}

pub fn edge_line(edge: &MMEdge) -> String {
    let (s, t) = edge.oriented();
    format!("{s} -> {t}: {}", edge.description_text())
}

fn segment_line(seg: &Segment) -> String {
    format!("[{}] {}", seg.segment_id, seg.text)
}

/// Fills whole segment lines in order while they fit in `room` tokens.
fn pack_segments<'a>(
    ordered: impl Iterator<Item = &'a Segment>,
    mut room: usize,
) -> (Vec<SegmentId>, Vec<String>, usize) {
    let (mut ids, mut lines, mut used) = (Vec::new(), Vec::new(), 0);
    for seg in ordered {
        let line = segment_line(seg);
        let t = count_tokens(&line);
        if t > room {
            break;
        }
        room -= t;
        used += t;
        ids.push(seg.segment_id.clone());
        lines.push(line);
    }
    (ids, lines, used)
}

/// Graph outline (entities, then relationships) followed by the cited
/// segments, best first. Non-seed lines are dropped before seed lines;
/// segments are dropped whole from the tail.
pub fn assemble_context(
    sub: &RetrievedSubgraph,
    g: &KgFragment,
    segments: &BTreeMap<SegmentId, Segment>,
    budget: usize,
) -> Result<AssembledContext, RetrievalError> {
    let seed_set: BTreeSet<&ElementId> = sub.seeds.iter().map(|(e, _)| e).collect();
    // (element, line, is_seed, score)
    let mut lines: Vec<(&ElementId, String, bool, f64)> = Vec::new();
    for pass_entities in [true, false] {
        for x in &sub.expansion {
            let line = match (&x.element, pass_entities) {
                (ElementId::Entity(n), true) => g.nodes.get(n).map(entity_line),
                (ElementId::Edge(k), false) => g.edges.get(k).map(edge_line),
                _ => None,
            };
            if let Some(line) = line {
                lines.push((&x.element, line, seed_set.contains(&x.element), x.score));
            }
        }
    }
    let seed_tokens: usize = lines.iter().filter(|l| l.2).map(|l| count_tokens(&l.1)).sum();
    if seed_tokens > budget {
        return Err(RetrievalError::BudgetBelowSeeds);
    }
    let mut total: usize = lines.iter().map(|l| count_tokens(&l.1)).sum();
    while total > budget {
        let drop = lines.iter().rposition(|l| !l.2).expect("seed lines fit the budget");
        total -= count_tokens(&lines[drop].1);
        lines.remove(drop);
    }

    let mut seg_score: BTreeMap<&SegmentId, f64> = BTreeMap::new();
    for (el, _, _, score) in &lines {
        for sid in el.source_segments(g).into_iter().flatten() {
            let e = seg_score.entry(sid).or_insert(f64::NEG_INFINITY);
            *e = e.max(*score);
        }
    }
    let mut ranked: Vec<(&SegmentId, f64)> = seg_score.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let ordered = ranked.iter().filter_map(|(sid, _)| {
        let seg = segments.get(*sid);
        if seg.is_none() {
            log::warn!("segment {sid} cited by the graph is not in the segment store");
        }
        seg
    });
    let (seg_ids, seg_lines, used) = pack_segments(ordered, budget - total);

    Ok(AssembledContext {
        graph_block: lines.iter().map(|l| l.1.as_str()).collect::<Vec<_>>().join("\n"),
        segment_block: seg_lines.join("\n\n"),
        elements: lines.iter().map(|l| l.0.clone()).collect(),
        segments: seg_ids,
        token_count: total + used,
    })
}

/// Chunk-only ablation: the `k` best segments of the candidate documents,
/// with no graph outline.
pub fn retrieve_chunks(
    query_vec: &[f64],
    candidates: &BTreeSet<String>,
    index: &VectorIndex,
    segments: &BTreeMap<SegmentId, Segment>,
    k: usize,
    budget: usize,
) -> Result<AssembledContext, RetrievalError> {
    let mut hits: Vec<ScoredHit> = Vec::new();
    for seg in segments.values().filter(|s| candidates.contains(&s.doc_id)) {
        let id = seg.segment_id.to_string();
        if let Some(score) = index.score(query_vec, ItemKind::Segment, &id)? {
            hits.push(ScoredHit { item_id: id, kind: ItemKind::Segment, score });
        }
    }
    hits.sort_by(|a, b| hit_order(a.score, &a.item_id, b.score, &b.item_id));
    hits.truncate(k);
    let ordered = hits.iter().filter_map(|h| h.item_id.parse::<SegmentId>().ok()).filter_map(|id| segments.get(&id));
    let (seg_ids, seg_lines, used) = pack_segments(ordered, budget);
    Ok(AssembledContext {
        graph_block: String::new(),
        segment_block: seg_lines.join("\n\n"),
        elements: Vec::new(),
        segments: seg_ids,
        token_count: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::parse_records;
    use crate::fusion::{aggregate_document_graph, build_textual_subgraph};

    fn graph(doc: &str, records: &str) -> MultimodalKG {
        let frag = build_textual_subgraph(&parse_records(records), &SegmentId::new(doc, 0)).fragment;
        aggregate_document_graph([&frag], doc)
    }

    fn line_graph() -> KgFragment {
        // A - B - C - D
        graph(
            "d",
            "(\"entity\"|A|t|a)\n(\"entity\"|B|t|b)\n(\"entity\"|C|t|c)\n(\"entity\"|D|t|d)\n\
             (\"relationship\"|A|B|ab|1)\n(\"relationship\"|B|C|bc|1)\n(\"relationship\"|C|D|cd|1)",
        )
        .graph
    }

    fn ent(n: &str) -> ElementId {
        ElementId::Entity(n.into())
    }

    #[test]
    fn shared_entity_merges_with_provenance() {
        let store = KgStore::from_graphs([
            graph("docA", "(\"entity\"|PARIS|city|capital)"),
            graph("docB", "(\"entity\"|Paris|city|in France)\n(\"entity\"|SEINE|river|x)"),
        ]);
        let g = compose_query_graph(&store, &["docB", "docA"]).unwrap();
        assert_eq!(g.graph.nodes.len(), 2);
        let prov = g.provenance(&ent("PARIS"));
        assert_eq!(prov, BTreeSet::from(["docA".to_string(), "docB".to_string()]));
        assert!(matches!(compose_query_graph(&store, &["nope"]), Err(RetrievalError::MissingGraph(d)) if d == "nope"));
    }

    #[test]
    fn zero_hops_returns_seeds() {
        let g = line_graph();
        let seeds = vec![(ent("B"), 0.5)];
        let sub = expand_subgraph(&g, &seeds, 0, 0.0, &HashMap::new());
        assert_eq!(sub.expansion, vec![ExpandedElement { element: ent("B"), hop: 0, score: 0.5 }]);
    }

    #[test]
    fn one_hop_filters_by_relative_threshold() {
        let g = line_graph();
        let scores: HashMap<ElementId, f64> = [(ent("A"), 0.95), (ent("B"), 1.0), (ent("C"), 0.5)].into_iter().collect();
        let seeds = vec![(ent("B"), 1.0)];
        let unfiltered = expand_subgraph(&g, &seeds, 1, 0.0, &scores);
        let names: BTreeSet<_> = unfiltered.elements().cloned().collect();
        assert_eq!(names, BTreeSet::from([ent("A"), ent("B"), ent("C"), ElementId::edge("A", "B"), ElementId::edge("B", "C")]));
        let filtered = expand_subgraph(&g, &seeds, 1, 0.9, &scores);
        assert!(filtered.contains(&ent("A")) && !filtered.contains(&ent("C")));
    }

    #[test]
    fn context_dedupes_segments_and_respects_budget() {
        let g = line_graph();
        let seg = Segment {
            doc_id: "d".into(),
            segment_id: SegmentId::new("d", 0),
            text: "one two three".into(),
            image_ids: vec![],
            source_sections: vec![0],
        };
        let store = BTreeMap::from([(seg.segment_id.clone(), seg)]);
        let seeds = vec![(ent("A"), 0.9), (ElementId::edge("A", "B"), 0.8)];
        let sub = expand_subgraph(&g, &seeds, 0, 0.9, &HashMap::new());
        let ctx = assemble_context(&sub, &g, &store, 100).unwrap();
        assert_eq!(ctx.graph_block, "A (t): a\nA -> B: ab");
        assert_eq!(ctx.segments.len(), 1);
        assert_eq!(count_tokens(&ctx.render()), ctx.token_count);

        let tight = assemble_context(&sub, &g, &store, 10).unwrap();
        assert!(tight.segments.is_empty());
        assert!(matches!(assemble_context(&sub, &g, &store, 6), Err(RetrievalError::BudgetBelowSeeds)));
    }
}
