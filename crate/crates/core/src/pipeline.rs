//! Offline graph construction, index building, artifact files and the
//! query engine tying the stages together.
//!
//! Build directory layout:
//!
//! ```text
//! <dir>/documents.jsonl   documents that were built
//! <dir>/segments.jsonl    one segment per line
//! <dir>/kg/<doc_id>.json  per-document graph
//! <dir>/build_report.json counts and per-document failures
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, EmbedRole, EmbeddingBackend};
use crate::corpus::{segment_document, ChunkPolicy, Corpus, CorpusError, Document, Segment, SegmentId};
use crate::extraction::{
    parse_records, render_extraction_prompt, render_matching_prompt, ExtractionError, PromptSet, TextualGraph,
};
use crate::fusion::{aggregate_document_graph, apply_matchings, build_textual_subgraph, KgError, MultimodalKG};
use crate::harness::generate_answer;
use crate::index::{IndexEntry, IndexError, ItemKind, ScoredHit, VectorIndex};
use crate::retrieval::{
    assemble_context, compose_query_graph, document_parts, edge_parts, embed_parts, embed_query, entity_parts,
    expand_subgraph, retrieve_chunks, retrieve_documents, score_elements, segment_parts, select_seeds,
    AssembledContext, ElementId, KgStore, Query, RetrievalConfig, RetrievalError, RetrievedSubgraph,
};
use crate::scenegraph::{ingest_scene_graph, SceneGraphError, VisualGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error("scene graph for image {image}: {source}")]
    SceneGraph { image: String, source: SceneGraphError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Where scene graphs for images come from.
#[derive(Debug, Clone, Default)]
pub enum SceneGraphSource {
    /// Every image gets an empty scene graph.
    #[default]
    None,
    /// `<dir>/<image_id>.json` or `<dir>/<image_id>.txt`, in either accepted format.
    Dir(PathBuf),
    Memory(BTreeMap<String, VisualGraph>),
}

impl SceneGraphSource {
    pub fn get(&self, image_id: &str) -> Result<VisualGraph, PipelineError> {
        match self {
            SceneGraphSource::None => Ok(VisualGraph::empty(image_id)),
            SceneGraphSource::Memory(m) => Ok(m.get(image_id).cloned().unwrap_or_else(|| VisualGraph::empty(image_id))),
            SceneGraphSource::Dir(dir) => {
                for ext in ["json", "txt"] {
                    let path = dir.join(format!("{image_id}.{ext}"));
                    if path.is_file() {
                        let raw = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                        let report = ingest_scene_graph(&raw, image_id)
                            .map_err(|source| PipelineError::SceneGraph { image: image_id.to_string(), source })?;
                        for reason in &report.dropped {
                            log::warn!("scene graph {image_id}: dropped {reason}");
                        }
                        return Ok(report.graph);
                    }
                }
                Ok(VisualGraph::empty(image_id))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub policy: ChunkPolicy,
    pub prompts: PromptSet,
    /// In-context examples appended to every matching prompt.
    pub exemplars: Vec<String>,
    pub seed: u64,
    /// Documents built concurrently; bounds in-flight backend requests.
    pub parallelism: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { policy: ChunkPolicy::default(), prompts: PromptSet::default(), exemplars: Vec::new(), seed: 0, parallelism: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocStats {
    pub segments: usize,
    pub entities: usize,
    pub edges: usize,
    pub rejects: usize,
    pub dangling: usize,
    pub matches_applied: usize,
    pub matches_dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocBuild {
    pub graph: MultimodalKG,
    pub segments: Vec<Segment>,
    pub stats: DocStats,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusBuild {
    /// Successful builds in corpus order.
    pub docs: Vec<DocBuild>,
    pub failures: Vec<(String, String)>,
}

/// Segments `doc`, extracts a textual graph per segment, matches it against
/// each image the segment carries, and merges the fragments.
pub fn build_document(
    doc: &Document,
    opts: &BuildOptions,
    chat: &dyn ChatBackend,
    scene_graphs: &SceneGraphSource,
) -> Result<DocBuild, PipelineError> {
    let segments = segment_document(doc, &opts.policy);
    let mut stats = DocStats { segments: segments.len(), ..DocStats::default() };
    let mut fragments = Vec::with_capacity(segments.len());
    for seg in &segments {
        let prompt = render_extraction_prompt(&seg.text, &opts.prompts);
        let batch = parse_records(&chat.chat_complete(&prompt.into_request(opts.seed))?);
        stats.rejects += batch.rejects.len();
        let sub = build_textual_subgraph(&batch, &seg.segment_id);
        stats.dangling += sub.dangling;
        let mut fragment = sub.fragment;
        let tg = TextualGraph::from(&batch);
        for image_id in &seg.image_ids {
            let Some(image) = doc.image(image_id) else { continue };
            let vg = scene_graphs.get(image_id)?;
            let prompt = render_matching_prompt(image, &tg, &vg, &opts.exemplars, &opts.prompts);
            let reply = parse_records(&chat.chat_complete(&prompt.into_request(opts.seed))?);
            stats.rejects += reply.rejects.len();
            let report = apply_matchings(&mut fragment, &reply.matches, &vg);
            stats.matches_applied += report.applied;
            stats.matches_dropped += report.dropped.len();
            for reason in report.dropped {
                log::debug!("{}: match dropped: {reason}", seg.segment_id);
            }
        }
        fragments.push(fragment);
    }
    let graph = aggregate_document_graph(&fragments, &doc.doc_id);
    stats.entities = graph.graph.nodes.len();
    stats.edges = graph.graph.edges.len();
    Ok(DocBuild { graph, segments, stats })
}

fn pool(parallelism: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build().expect("thread pool")
}

/// Builds every document; a failing document is reported and skipped.
pub fn build_corpus(
    corpus: &Corpus,
    opts: &BuildOptions,
    chat: &dyn ChatBackend,
    scene_graphs: &SceneGraphSource,
) -> CorpusBuild {
    let results: Vec<(String, Result<DocBuild, PipelineError>)> = pool(opts.parallelism).install(|| {
        corpus
            .documents()
            .par_iter()
            .map(|doc| (doc.doc_id.clone(), build_document(doc, opts, chat, scene_graphs)))
            .collect()
    });
    let mut out = CorpusBuild::default();
    for (doc_id, result) in results {
        match result {
            Ok(b) => out.docs.push(b),
            Err(e) => {
                log::warn!("document {doc_id} failed: {e}");
                out.failures.push((doc_id, e.to_string()));
            }
        }
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|e| io_err(path)(e.into()))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| PipelineError::Malformed {
            path: format!("{}:{}", path.display(), n + 1),
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Serialize)]
struct BuildReport<'a> {
    documents: usize,
    failures: &'a [(String, String)],
    stats: BTreeMap<&'a str, &'a DocStats>,
}

/// Writes the build directory for the documents that built successfully.
pub fn write_build(dir: impl AsRef<Path>, corpus: &Corpus, build: &CorpusBuild) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    let kg_dir = dir.join("kg");
    std::fs::create_dir_all(&kg_dir).map_err(io_err(&kg_dir))?;
    for b in &build.docs {
        b.graph.save(kg_dir.join(format!("{}.json", b.graph.doc_id)))?;
    }
    let built: BTreeSet<&str> = build.docs.iter().map(|b| b.graph.doc_id.as_str()).collect();
    write_jsonl(&dir.join("documents.jsonl"), corpus.iter().filter(|d| built.contains(d.doc_id.as_str())))?;
    write_jsonl(&dir.join("segments.jsonl"), build.docs.iter().flat_map(|b| &b.segments))?;
    let report = BuildReport {
        documents: build.docs.len(),
        failures: &build.failures,
        stats: build.docs.iter().map(|b| (b.graph.doc_id.as_str(), &b.stats)).collect(),
    };
    let path = dir.join("build_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_err(&path))
}

/// Everything the query engine reads.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub documents: Vec<Document>,
    pub store: KgStore,
    pub segments: BTreeMap<SegmentId, Segment>,
}

impl Artifacts {
    pub fn from_build(corpus: &Corpus, build: &CorpusBuild) -> Self {
        let built: BTreeSet<&str> = build.docs.iter().map(|b| b.graph.doc_id.as_str()).collect();
        Self {
            documents: corpus.iter().filter(|d| built.contains(d.doc_id.as_str())).cloned().collect(),
            store: KgStore::from_graphs(build.docs.iter().map(|b| b.graph.clone())),
            segments: build.docs.iter().flat_map(|b| &b.segments).map(|s| (s.segment_id.clone(), s.clone())).collect(),
        }
    }

    /// Reads a build directory. Graphs stay on disk and are loaded per query.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let kg_dir = dir.join("kg");
        if !kg_dir.is_dir() {
            return Err(PipelineError::MissingArtifact(kg_dir.display().to_string()));
        }
        let documents: Vec<Document> = read_jsonl(&dir.join("documents.jsonl"))?;
        let segments: Vec<Segment> = read_jsonl(&dir.join("segments.jsonl"))?;
        Ok(Self {
            documents,
            store: KgStore::Dir(kg_dir),
            segments: segments.into_iter().map(|s| (s.segment_id.clone(), s)).collect(),
        })
    }

    pub fn graph(&self, doc_id: &str) -> Result<Arc<MultimodalKG>, PipelineError> {
        Ok(self.store.load(doc_id)?)
    }
}

/// Embeds documents, graph elements and segments with the evidence role.
pub fn build_index(artifacts: &Artifacts, embedder: &dyn EmbeddingBackend, parallelism: usize) -> Result<VectorIndex, PipelineError> {
    let mut jobs: Vec<(ItemKind, String, Vec<crate::backends::Part>, String)> = Vec::new();
    for doc in &artifacts.documents {
        let locator = format!("kg/{}.json", doc.doc_id);
        jobs.push((ItemKind::Document, doc.doc_id.clone(), document_parts(doc), locator.clone()));
        let kg = artifacts.graph(&doc.doc_id)?;
        for node in kg.graph.nodes.values() {
            let id = ElementId::Entity(node.name.clone()).item_id(&doc.doc_id);
            jobs.push((ItemKind::Entity, id, entity_parts(node), locator.clone()));
        }
        for edge in kg.graph.edges.values() {
            let id = ElementId::Edge(edge.endpoints.clone()).item_id(&doc.doc_id);
            jobs.push((ItemKind::Edge, id, edge_parts(edge), locator.clone()));
        }
    }
    for seg in artifacts.segments.values() {
        let id = seg.segment_id.to_string();
        jobs.push((ItemKind::Segment, id.clone(), segment_parts(seg), id));
    }
    let entries: Vec<IndexEntry> = pool(parallelism).install(|| {
        jobs.into_par_iter()
            .map(|(kind, id, parts, locator)| {
                let v = embed_parts(embedder, EmbedRole::Evidence, parts)?;
                Ok(IndexEntry::new(kind, id, v, locator))
            })
            .collect::<Result<_, PipelineError>>()
    })?;
    let mut index = VectorIndex::new(embedder.dim());
    let outcome = index.upsert(entries);
    if let Some((id, kind)) = outcome.errors.first() {
        return Err(PipelineError::Index(IndexError::Corrupt(format!("entry {id} rejected: {kind:?}"))));
    }
    Ok(index)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    #[default]
    Graph,
    Chunk,
}

/// Milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed_query: f64,
    pub documents: f64,
    pub compose: f64,
    pub score: f64,
    pub expand: f64,
    pub assemble: f64,
    pub generate: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.embed_query + self.documents + self.compose + self.score + self.expand + self.assemble + self.generate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Document ranking, possibly deeper than `k_d` for recall measurement.
    pub doc_hits: Vec<ScoredHit>,
    /// All composed-graph elements, best first. Empty in chunk mode.
    pub ranked_elements: Vec<(ElementId, f64)>,
    pub subgraph: Option<RetrievedSubgraph>,
    pub context: AssembledContext,
    pub answer: String,
    pub timings: StageTimings,
}

pub struct Engine {
    pub artifacts: Artifacts,
    pub index: VectorIndex,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub chat: Arc<dyn ChatBackend>,
    pub prompts: PromptSet,
    pub seed: u64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn new(
        artifacts: Artifacts,
        index: VectorIndex,
        embedder: Arc<dyn EmbeddingBackend>,
        chat: Arc<dyn ChatBackend>,
    ) -> Self {
        Self { artifacts, index, embedder, chat, prompts: PromptSet::default(), seed: 0 }
    }

    /// Retrieval without answer generation. `recall_depth` documents are
    /// ranked; the first `cfg.k_d` become candidates.
    pub fn retrieve(
        &self,
        query: &Query,
        cfg: &RetrievalConfig,
        mode: RetrievalMode,
        recall_depth: usize,
    ) -> Result<QueryOutcome, PipelineError> {
        cfg.validate()?;
        let mut t = StageTimings::default();
        let start = Instant::now();

        let s = Instant::now();
        let qv = embed_query(self.embedder.as_ref(), query)?;
        t.embed_query = ms(s);

        let s = Instant::now();
        let doc_hits = retrieve_documents(&qv, &self.index, recall_depth.max(cfg.k_d))?;
        let candidates: Vec<&str> = doc_hits.iter().take(cfg.k_d).map(|h| h.item_id.as_str()).collect();
        t.documents = ms(s);

        let (ranked_elements, subgraph, context) = match mode {
            RetrievalMode::Graph => {
                let s = Instant::now();
                let composed = compose_query_graph(&self.artifacts.store, &candidates)?;
                t.compose = ms(s);

                let s = Instant::now();
                let ranked = score_elements(&qv, &composed, self.embedder.as_ref(), Some(&self.index))?;
                let seeds = select_seeds(&ranked, cfg.k_g);
                t.score = ms(s);

                let s = Instant::now();
                let scores: HashMap<ElementId, f64> = ranked.iter().cloned().collect();
                let sub = expand_subgraph(&composed.graph, &seeds, cfg.hops, cfg.rho, &scores);
                t.expand = ms(s);

                let s = Instant::now();
                let ctx = assemble_context(&sub, &composed.graph, &self.artifacts.segments, cfg.budget)?;
                t.assemble = ms(s);
                (ranked, Some(sub), ctx)
            }
            RetrievalMode::Chunk => {
                let s = Instant::now();
                let set: BTreeSet<String> = candidates.iter().map(|c| c.to_string()).collect();
                let ctx = retrieve_chunks(&qv, &set, &self.index, &self.artifacts.segments, cfg.k_g, cfg.budget)?;
                t.assemble = ms(s);
                (Vec::new(), None, ctx)
            }
        };
        t.total = ms(start);
        Ok(QueryOutcome { doc_hits, ranked_elements, subgraph, context, answer: String::new(), timings: t })
    }

    /// Retrieval followed by answer generation.
    pub fn answer(
        &self,
        query: &Query,
        cfg: &RetrievalConfig,
        mode: RetrievalMode,
        recall_depth: usize,
    ) -> Result<QueryOutcome, PipelineError> {
        let start = Instant::now();
        let mut out = self.retrieve(query, cfg, mode, recall_depth)?;
        let s = Instant::now();
        out.answer = generate_answer(query, &out.context, self.chat.as_ref(), &self.prompts, self.seed)?;
        out.timings.generate = ms(s);
        out.timings.total = ms(start);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockChatBackend, MockEmbeddingBackend};
    use crate::corpus::{ImageAsset, Section};
    use crate::extraction::{EXTRACT_TEMPLATE, MATCH_TEMPLATE};

    fn doc() -> Document {
        Document {
            doc_id: "fuji".into(),
            title: "Mount Fuji".into(),
            sections: vec![Section {
                heading: "Overview".into(),
                text: "Mount Fuji is tall. The Shinkansen passes near it.".into(),
                image_ids: vec!["img1".into()],
            }],
            images: vec![ImageAsset { image_id: "img1".into(), uri: "img1.jpg".into(), caption: None }],
        }
    }

    fn chat() -> MockChatBackend {
        let mut chat = MockChatBackend::new();
        chat.add_fixture(
            EXTRACT_TEMPLATE,
            "Fuji",
            "(\"entity\"|MOUNT FUJI|location|a mountain)\n(\"entity\"|SHINKANSEN|vehicle|a train)\n\
             (\"relationship\"|SHINKANSEN|MOUNT FUJI|passes near|7)",
        );
        chat.add_fixture(MATCH_TEMPLATE, "img1", "(\"matching\"|<image>|MOUNT FUJI|8)\n(\"matching\"|<object-0>|SHINKANSEN|9)");
        chat
    }

    #[test]
    fn builds_graph_with_regions() {
        let vg = ingest_scene_graph("- <object-0>: train, (0.06, 0.64, 1.0, 0.77)", "img1").unwrap().graph;
        let sg = SceneGraphSource::Memory(BTreeMap::from([("img1".to_string(), vg)]));
        let built = build_document(&doc(), &BuildOptions::default(), &chat(), &sg).unwrap();
        assert_eq!(built.stats.entities, 2);
        assert_eq!(built.stats.edges, 1);
        assert_eq!(built.stats.matches_applied, 2);
        assert_eq!(built.graph.graph.nodes["SHINKANSEN"].regions.len(), 1);
    }

    #[test]
    fn build_dir_round_trip_and_query() {
        let corpus = Corpus::from_documents([doc()]);
        let build = build_corpus(&corpus, &BuildOptions::default(), &chat(), &SceneGraphSource::None);
        assert!(build.failures.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_build(dir.path(), &corpus, &build).unwrap();
        let artifacts = Artifacts::load(dir.path()).unwrap();
        assert_eq!(artifacts.segments.len(), 1);
        let embedder: Arc<dyn EmbeddingBackend> = Arc::new(MockEmbeddingBackend::new(64));
        let index = build_index(&artifacts, embedder.as_ref(), 2).unwrap();
        assert_eq!(index.len_kind(ItemKind::Entity), 2);
        let mut chat = chat();
        chat.set_fallback(crate::extraction::ANSWER_TEMPLATE, "no idea");
        let engine = Engine::new(artifacts, index, embedder, Arc::new(chat));
        let q = Query::new("What mountain is this?", Some("img1".into())).unwrap();
        let out = engine.answer(&q, &RetrievalConfig::default(), RetrievalMode::Graph, 10).unwrap();
        assert_eq!(out.doc_hits[0].item_id, "fuji");
        assert!(out.context.graph_block.contains("MOUNT FUJI"));
        assert_eq!(out.answer, "no idea");
    }

    #[test]
    fn missing_artifacts_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = Artifacts::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("kg"));
    }
}
