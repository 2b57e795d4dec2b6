//! Answer generation, evaluation metrics and the experiment runner.
//!
//! A report holds the config echo and, per run of a sweep, metrics plus
//! per-query records. Wall-clock timings go to a separate sidecar so that
//! reports are byte-identical across runs with the same inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, ChatBackend, EmbeddingBackend, HttpBackend, MockChatBackend, MockEmbeddingBackend,
    OpenAiCompatBackend, Part, DEFAULT_DIM,
};
use crate::corpus::{ChunkPolicy, SegmentId};
use crate::extraction::PromptSet;
use crate::index::VectorIndex;
use crate::pipeline::{Artifacts, Engine, PipelineError, QueryOutcome, RetrievalMode, StageTimings};
use crate::retrieval::{AssembledContext, ElementId, Query, RetrievalConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const BACKEND_URL_ENV: &str = "MKGRAG_BACKEND_URL";
pub const RECALL_KS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset {path}: {message}")]
    Dataset { path: String, message: String },
    #[error("no records to score")]
    EmptyRecords,
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

/// Prompt: image, question, graph outline, passages. An empty context sends
/// only the image and the question.
pub fn generate_answer(
    query: &Query,
    ctx: &AssembledContext,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    seed: u64,
) -> Result<String, BackendError> {
    let parts = if ctx.is_empty() {
        let mut parts: Vec<Part> = query.image_id.iter().map(|id| Part::image(id.clone())).collect();
        parts.push(Part::text(format!("Question: {}", query.question)));
        parts
    } else {
        prompts.answer.render(
            &[("QUESTION", &query.question), ("GRAPH", &ctx.graph_block), ("SEGMENTS", &ctx.segment_block)],
            query.image_id.as_deref(),
        )
    };
    let req = crate::backends::ChatRequest::new(prompts.answer.id.clone(), parts).with_seed(seed);
    Ok(backend.chat_complete(&req)?.trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Exact,
    Contains,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip punctuation, collapse whitespace, drop one leading article.
pub fn normalize_answer(s: &str) -> String {
    let stripped: String = s.to_lowercase().chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    let mut words: Vec<&str> = stripped.split_whitespace().collect();
    if words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

pub fn answer_matches(predicted: &str, gold: &[String], mode: MatchMode) -> bool {
    let pred = normalize_answer(predicted);
    gold.iter().map(|g| normalize_answer(g)).any(|g| match mode {
        MatchMode::Exact => g == pred,
        MatchMode::Contains => !g.is_empty() && pred.contains(&g),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub image_id: Option<String>,
    pub gold_doc_id: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_elements: Vec<ElementId>,
    #[serde(default)]
    pub gold_segments: Vec<SegmentId>,
    #[serde(default)]
    pub split: Option<String>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, HarnessError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    let bad = |message: String| HarnessError::Dataset { path: path.display().to_string(), message };
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        if rec.gold_answers.is_empty() {
            return Err(bad(format!("line {}: gold_answers is empty", n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub query: Query,
    pub gold_doc_id: String,
    pub gold_answers: Vec<String>,
    pub predicted: String,
    /// 1-based rank of the gold document, if retrieved.
    pub gold_doc_rank: Option<usize>,
    pub retrieved_docs: Vec<String>,
    /// 1-based rank of the best gold element in the pooled element ranking.
    pub gold_element_rank: Option<usize>,
    /// Whether any gold element is in the retrieved subgraph; `None` without gold elements or in chunk mode.
    pub gold_element_retrieved: Option<bool>,
    pub context_segments: Vec<SegmentId>,
    /// Context segments not listed as gold; `None` without gold segments.
    pub non_gold_segments: Option<usize>,
    pub context_tokens: usize,
    pub split: Option<String>,
}

pub fn vqa_accuracy(records: &[EvalRecord], mode: MatchMode) -> Result<f64, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let hits = records.iter().filter(|r| answer_matches(&r.predicted, &r.gold_answers, mode)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of records whose gold document ranks within `k`. Zero for no records.
pub fn recall_at_k(records: &[EvalRecord], k: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records.iter().filter(|r| r.gold_doc_rank.is_some_and(|rank| rank <= k)).count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        fixtures: Option<PathBuf>,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        url: String,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Openai {
        url: String,
        chat_model: String,
        embed_model: String,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        image_base: Option<String>,
    },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { fixtures: None, dim: DEFAULT_DIM }
    }
}

pub type Backends = (Arc<dyn ChatBackend>, Arc<dyn EmbeddingBackend>);

impl BackendConfig {
    /// Points the config at `url`; a mock config becomes a native HTTP one.
    pub fn override_url(&mut self, url: &str) {
        match self {
            BackendConfig::Mock { dim, .. } => *self = BackendConfig::Http { url: url.to_string(), dim: *dim },
            BackendConfig::Http { url: u, .. } | BackendConfig::Openai { url: u, .. } => *u = url.to_string(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BackendConfig::Mock { dim, .. } | BackendConfig::Http { dim, .. } | BackendConfig::Openai { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Backends, HarnessError> {
        Ok(match self {
            BackendConfig::Mock { fixtures, dim } => {
                let chat = match fixtures {
                    Some(p) => MockChatBackend::load(p)?,
                    None => MockChatBackend::new(),
                };
                (Arc::new(chat), Arc::new(MockEmbeddingBackend::new(*dim)))
            }
            BackendConfig::Http { url, dim } => {
                let b = Arc::new(HttpBackend::new(url.clone(), *dim));
                (b.clone(), b)
            }
            BackendConfig::Openai { url, chat_model, embed_model, dim, api_key_env, image_base } => {
                let mut b = OpenAiCompatBackend::new(url.clone(), chat_model.clone(), embed_model.clone(), *dim);
                if let Some(var) = api_key_env {
                    let key = std::env::var(var).map_err(|_| HarnessError::Config(format!("environment variable {var} is not set")))?;
                    b = b.with_api_key(key);
                }
                if let Some(base) = image_base {
                    b = b.with_image_base(base.clone());
                }
                let b = Arc::new(b);
                (b.clone(), b)
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    #[serde(default)]
    pub k_g: Vec<usize>,
    #[serde(default)]
    pub hops: Vec<usize>,
    #[serde(default)]
    pub mode: Vec<RetrievalMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub k_d: usize,
    pub k_g: usize,
    pub hops: usize,
    pub rho: f64,
    pub budget: usize,
    pub chunk_policy: ChunkPolicy,
    pub mode: RetrievalMode,
    pub seed: u64,
    pub parallelism: usize,
    /// Documents ranked per query for recall measurement (candidates stay `k_d`).
    pub recall_depth: usize,
    pub backend: BackendConfig,
    /// Build directory produced by `build-kg`.
    pub artifacts: Option<PathBuf>,
    /// Index file produced by `embed-index`.
    pub index: Option<PathBuf>,
    /// Directory of prompt overrides.
    pub prompts: Option<PathBuf>,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        Self {
            k_d: r.k_d,
            k_g: r.k_g,
            hops: r.hops,
            rho: r.rho,
            budget: r.budget,
            chunk_policy: ChunkPolicy::default(),
            mode: RetrievalMode::Graph,
            seed: 0,
            parallelism: 4,
            recall_depth: 50,
            backend: BackendConfig::default(),
            artifacts: None,
            index: None,
            prompts: None,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative paths resolve against the file's
    /// directory; `MKGRAG_BACKEND_URL` overrides the backend endpoint.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
        let mut cfg: Self = serde_json::from_str(&raw).map_err(|e| HarnessError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        resolve(&mut cfg.artifacts);
        resolve(&mut cfg.index);
        resolve(&mut cfg.prompts);
        if let BackendConfig::Mock { fixtures, .. } = &mut cfg.backend {
            resolve(fixtures);
        }
        cfg.apply_env_override(std::env::var(BACKEND_URL_ENV).ok().as_deref());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env_override(&mut self, url: Option<&str>) {
        if let Some(url) = url.filter(|u| !u.is_empty()) {
            self.backend.override_url(url);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.retrieval().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.chunk_policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.parallelism == 0 || self.recall_depth == 0 {
            return Err(HarnessError::Config("parallelism and recall_depth must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.k_g.contains(&0) {
                return Err(HarnessError::Config("sweep k_g values must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig { k_d: self.k_d, k_g: self.k_g, hops: self.hops, rho: self.rho, budget: self.budget }
    }

    /// Run settings of the sweep (cartesian product), or the base settings.
    pub fn runs(&self) -> Vec<RunSettings> {
        let sweep = self.sweep.clone().unwrap_or_default();
        let or_base = |v: Vec<usize>, base: usize| if v.is_empty() { vec![base] } else { v };
        let k_gs = or_base(sweep.k_g, self.k_g);
        let hops = or_base(sweep.hops, self.hops);
        let modes = if sweep.mode.is_empty() { vec![self.mode] } else { sweep.mode };
        let mut out = Vec::new();
        for &mode in &modes {
            for &k_g in &k_gs {
                for &h in &hops {
                    out.push(RunSettings { mode, retrieval: RetrievalConfig { k_g, hops: h, ..self.retrieval() } });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mode: RetrievalMode,
    #[serde(flatten)]
    pub retrieval: RetrievalConfig,
}

impl RunSettings {
    pub fn label(&self) -> String {
        let mode = match self.mode {
            RetrievalMode::Graph => "graph",
            RetrievalMode::Chunk => "chunk",
        };
        format!("mode={mode},k_g={},hops={}", self.retrieval.k_g, self.retrieval.hops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    pub accuracy_exact: f64,
    pub accuracy_contains: f64,
    pub recall: BTreeMap<String, f64>,
    pub gold_element_recall: Option<f64>,
    pub non_gold_segments: Option<usize>,
    pub mean_context_tokens: f64,
}

impl Metrics {
    pub fn compute(records: &[EvalRecord]) -> Result<Self, HarnessError> {
        let recall = RECALL_KS.iter().map(|&k| (format!("R@{k}"), recall_at_k(records, k))).collect();
        let with_gold: Vec<bool> = records.iter().filter_map(|r| r.gold_element_retrieved).collect();
        let gold_element_recall =
            (!with_gold.is_empty()).then(|| with_gold.iter().filter(|&&x| x).count() as f64 / with_gold.len() as f64);
        let counted: Vec<usize> = records.iter().filter_map(|r| r.non_gold_segments).collect();
        Ok(Self {
            queries: records.len(),
            accuracy_exact: vqa_accuracy(records, MatchMode::Exact)?,
            accuracy_contains: vqa_accuracy(records, MatchMode::Contains)?,
            recall,
            gold_element_recall,
            non_gold_segments: (!counted.is_empty()).then(|| counted.iter().sum()),
            mean_context_tokens: records.iter().map(|r| r.context_tokens as f64).sum::<f64>() / records.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub settings: RunSettings,
    pub metrics: Metrics,
    pub per_split: BTreeMap<String, Metrics>,
    pub records: Vec<EvalRecord>,
}

impl RunReport {
    pub fn record(&self, id: &str) -> Option<&EvalRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn run(&self, label: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub label: String,
    pub per_query: Vec<StageTimings>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schema_version: u32,
    pub runs: Vec<RunTimings>,
}

/// Sidecar path for timings: `report.json` becomes `report.timings.json`.
pub fn timings_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    report.with_file_name(format!("{stem}.timings.json"))
}

fn eval_record(rec: &DatasetRecord, query: Query, out: &QueryOutcome, k_d: usize) -> EvalRecord {
    let gold_doc_rank = out.doc_hits.iter().position(|h| h.item_id == rec.gold_doc_id).map(|p| p + 1);
    let gold: BTreeSet<&ElementId> = rec.gold_elements.iter().collect();
    let gold_element_rank = out.ranked_elements.iter().position(|(e, _)| gold.contains(e)).map(|p| p + 1);
    let gold_element_retrieved = match (&out.subgraph, gold.is_empty()) {
        (Some(sub), false) => Some(sub.elements().any(|e| gold.contains(e))),
        _ => None,
    };
    let gold_segments: BTreeSet<&SegmentId> = rec.gold_segments.iter().collect();
    let non_gold_segments = (!gold_segments.is_empty())
        .then(|| out.context.segments.iter().filter(|s| !gold_segments.contains(s)).count());
    EvalRecord {
        id: rec.id.clone(),
        query,
        gold_doc_id: rec.gold_doc_id.clone(),
        gold_answers: rec.gold_answers.clone(),
        predicted: out.answer.clone(),
        gold_doc_rank,
        retrieved_docs: out.doc_hits.iter().take(k_d).map(|h| h.item_id.clone()).collect(),
        gold_element_rank,
        gold_element_retrieved,
        context_segments: out.context.segments.clone(),
        non_gold_segments,
        context_tokens: out.context.token_count,
        split: rec.split.clone(),
    }
}

/// Runs every configured setting over `dataset` with a ready engine.
pub fn run_with_engine(
    engine: &Engine,
    cfg: &ExperimentConfig,
    dataset: &[DatasetRecord],
) -> Result<(Report, TimingReport), HarnessError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallelism).build().expect("thread pool");
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    for settings in cfg.runs() {
        let start = std::time::Instant::now();
        let results: Vec<(EvalRecord, StageTimings)> = pool.install(|| {
            dataset
                .par_iter()
                .map(|rec| {
                    let query = Query::new(rec.question.clone(), rec.image_id.clone()).map_err(PipelineError::from)?;
                    let out = engine.answer(&query, &settings.retrieval, settings.mode, cfg.recall_depth)?;
                    Ok((eval_record(rec, query, &out, settings.retrieval.k_d), out.timings))
                })
                .collect::<Result<_, HarnessError>>()
        })?;
        let (records, per_query): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let mut by_split: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
        for r in &records {
            if let Some(s) = &r.split {
                by_split.entry(s.clone()).or_default().push(r.clone());
            }
        }
        let per_split = by_split
            .iter()
            .map(|(k, v)| Ok((k.clone(), Metrics::compute(v)?)))
            .collect::<Result<_, HarnessError>>()?;
        let label = settings.label();
        timings.push(RunTimings { label: label.clone(), per_query, total_ms: start.elapsed().as_secs_f64() * 1e3 });
        runs.push(RunReport { label, settings, metrics: Metrics::compute(&records)?, per_split, records });
    }
    Ok((
        Report { schema_version: SCHEMA_VERSION, config: cfg.clone(), runs },
        TimingReport { schema_version: SCHEMA_VERSION, runs: timings },
    ))
}

/// Loads artifacts, index and backends named by `cfg`, then runs the dataset.
pub fn run_experiment(cfg: &ExperimentConfig, dataset_path: impl AsRef<Path>) -> Result<(Report, TimingReport), HarnessError> {
    let artifacts_dir = cfg.artifacts.as_ref().ok_or_else(|| HarnessError::MissingArtifact("config.artifacts (build directory)".into()))?;
    let index_path = cfg.index.as_ref().ok_or_else(|| HarnessError::MissingArtifact("config.index (index file)".into()))?;
    if !index_path.is_file() {
        return Err(HarnessError::MissingArtifact(index_path.display().to_string()));
    }
    let artifacts = Artifacts::load(artifacts_dir)?;
    let index = VectorIndex::load(index_path).map_err(PipelineError::from)?;
    let (chat, embedder) = cfg.backend.build()?;
    if embedder.dim() != index.dim() {
        return Err(HarnessError::Config(format!("backend dim {} differs from index dim {}", embedder.dim(), index.dim())));
    }
    let mut engine = Engine::new(artifacts, index, embedder, chat);
    engine.seed = cfg.seed;
    if let Some(dir) = &cfg.prompts {
        engine.prompts = PromptSet::load_dir(dir).map_err(PipelineError::from)?;
    }
    let dataset = load_dataset(dataset_path)?;
    run_with_engine(&engine, cfg, &dataset)
}

/// Writes the report and its timing sidecar.
pub fn write_report(path: impl AsRef<Path>, report: &Report, timings: &TimingReport) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let write = |p: &Path, body: String| std::fs::write(p, body).map_err(|source| HarnessError::Io { path: p.display().to_string(), source });
    write(path, report.to_json())?;
    write(&timings_path(path), serde_json::to_string_pretty(timings).expect("timings serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pred: &str, gold: &[&str], rank: Option<usize>) -> EvalRecord {
        EvalRecord {
            id: "q".into(),
            query: Query::new("q?", None).unwrap(),
            gold_doc_id: "d".into(),
            gold_answers: gold.iter().map(|s| s.to_string()).collect(),
            predicted: pred.into(),
            gold_doc_rank: rank,
            retrieved_docs: vec![],
            gold_element_rank: None,
            gold_element_retrieved: None,
            context_segments: vec![],
            non_gold_segments: None,
            context_tokens: 0,
            split: None,
        }
    }

    #[test]
    fn normalization_and_modes() {
        assert_eq!(normalize_answer("The  Eiffel Tower."), "eiffel tower");
        assert!(answer_matches("The Eiffel Tower.", &["eiffel tower".into()], MatchMode::Exact));
        assert!(answer_matches("it was 1889", &["1889".into()], MatchMode::Contains));
        assert!(!answer_matches("it was 1889", &["1889".into()], MatchMode::Exact));
        assert!(matches!(vqa_accuracy(&[], MatchMode::Exact), Err(HarnessError::EmptyRecords)));
    }

    #[test]
    fn recall_counts_rank_within_k() {
        let recs = vec![rec("", &["x"], Some(7)), rec("", &["x"], Some(1)), rec("", &["x"], None)];
        assert_eq!(recall_at_k(&recs[..1], 10), 1.0);
        assert_eq!(recall_at_k(&recs[..1], 5), 0.0);
        assert!((recall_at_k(&recs, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn env_override_and_sweep() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_env_override(Some("http://127.0.0.1:9"));
        assert_eq!(cfg.backend, BackendConfig::Http { url: "http://127.0.0.1:9".into(), dim: DEFAULT_DIM });
        cfg.sweep = Some(Sweep { k_g: vec![1, 5], hops: vec![0, 1], mode: vec![] });
        let labels: Vec<_> = cfg.runs().iter().map(RunSettings::label).collect();
        assert_eq!(labels, ["mode=graph,k_g=1,hops=0", "mode=graph,k_g=1,hops=1", "mode=graph,k_g=5,hops=0", "mode=graph,k_g=5,hops=1"]);
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"k_g": 5, "backend": {"kind": "mock", "dim": 64}}"#).unwrap();
        assert_eq!((cfg.k_d, cfg.k_g, cfg.hops), (10, 5, 1));
        assert_eq!(cfg.backend.dim(), 64);
    }

    #[test]
    fn timings_sidecar_name() {
        assert_eq!(timings_path(Path::new("/x/report.json")), PathBuf::from("/x/report.timings.json"));
    }
}
