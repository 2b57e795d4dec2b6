//! Python bindings for the mkgrag engine.
//!
//! Structured values cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pythonize::{depythonize, pythonize};

use mkgrag_core::extraction::{self, RecordBatch};
use mkgrag_core::harness::{self, BackendConfig, DatasetRecord, ExperimentConfig, MatchMode};
use mkgrag_core::index::{self, IndexEntry, ItemKind};
use mkgrag_core::objectives::{self, BatchEmbeddings};
use mkgrag_core::pipeline::{self, Artifacts, RetrievalMode};
use mkgrag_core::retrieval::{Query, RetrievalConfig};
use mkgrag_core::scenegraph::{self, BBox, VisualGraph};
use mkgrag_core::synth::{PlantedLayout, PlantedSet, SynthOptions};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<PyObject> {
    Ok(pythonize(py, v).map_err(value_err)?.unbind())
}

fn kind(s: &str) -> PyResult<ItemKind> {
    s.parse().map_err(|_| value_err(format!("unknown item kind {s:?}")))
}

fn mode(s: &str) -> PyResult<RetrievalMode> {
    match s {
        "graph" => Ok(RetrievalMode::Graph),
        "chunk" => Ok(RetrievalMode::Chunk),
        other => Err(value_err(format!("unknown retrieval mode {other:?}"))),
    }
}

fn bbox(c: [f64; 4]) -> PyResult<BBox> {
    BBox::try_from(c).map_err(value_err)
}

/// Parse extraction output into entities, relationships, matches, rejects and dangling endpoints.
#[pyfunction]
fn parse_records(py: Python<'_>, raw: &str) -> PyResult<PyObject> {
    to_py(py, &extraction::parse_records(raw))
}

#[pyfunction]
fn serialize_records(batch: &Bound<'_, PyAny>) -> PyResult<String> {
    let batch: RecordBatch = depythonize(batch).map_err(value_err)?;
    Ok(extraction::serialize_records(&batch))
}

#[pyfunction]
fn canonical_name(name: &str) -> String {
    extraction::canonical_name(name)
}

#[pyfunction]
fn bbox_union(a: [f64; 4], b: [f64; 4]) -> PyResult<[f64; 4]> {
    Ok(scenegraph::bbox_union(&bbox(a)?, &bbox(b)?).coords())
}

/// Returns `(graph, dropped)`.
#[pyfunction]
fn ingest_scene_graph(py: Python<'_>, raw: &str, image_id: &str) -> PyResult<(PyObject, Vec<String>)> {
    let report = scenegraph::ingest_scene_graph(raw, image_id).map_err(value_err)?;
    Ok((to_py(py, &report.graph)?, report.dropped))
}

#[pyfunction]
fn render_scene_graph_block(graph: &Bound<'_, PyAny>) -> PyResult<String> {
    let vg: VisualGraph = depythonize(graph).map_err(value_err)?;
    Ok(scenegraph::render_scene_graph_block(&vg))
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    index::cosine_similarity(&a, &b).map_err(value_err)
}

#[pyfunction]
fn normalize_answer(s: &str) -> String {
    harness::normalize_answer(s)
}

#[pyfunction]
#[pyo3(signature = (predicted, gold, contains=false))]
fn answer_matches(predicted: &str, gold: Vec<String>, contains: bool) -> bool {
    let m = if contains { MatchMode::Contains } else { MatchMode::Exact };
    harness::answer_matches(predicted, &gold, m)
}

#[pyclass(module = "mkgrag")]
struct VectorIndex {
    inner: index::VectorIndex,
}

#[pymethods]
impl VectorIndex {
    #[new]
    fn new(dim: usize) -> Self {
        Self { inner: index::VectorIndex::new(dim) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        index::VectorIndex::load(path).map(|inner| Self { inner }).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        index::VectorIndex::from_bytes(data).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new_bound(py, &self.inner.to_bytes())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Insert or replace one entry. Returns false when the vector was rejected.
    #[pyo3(signature = (kind, item_id, vector, payload_ref=String::new()))]
    fn upsert(&mut self, kind: &str, item_id: String, vector: Vec<f64>, payload_ref: String) -> PyResult<bool> {
        let out = self.inner.upsert([IndexEntry::new(self::kind(kind)?, item_id, vector, payload_ref)]);
        Ok(out.errors.is_empty())
    }

    fn vector(&self, kind: &str, item_id: &str) -> PyResult<Option<Vec<f64>>> {
        Ok(self.inner.vector(self::kind(kind)?, item_id))
    }

    /// Top-k `(item_id, score)` pairs, best first.
    fn search(&self, query: Vec<f64>, kind: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let hits = self.inner.search_topk(&query, self::kind(kind)?, k).map_err(value_err)?;
        Ok(hits.into_iter().map(|h| (h.item_id, h.score)).collect())
    }
}

fn batch(
    queries: Vec<Vec<f64>>,
    evidences: Vec<Vec<f64>>,
    declaratives: Option<Vec<Vec<f64>>>,
    alpha: f64,
    temperature: f64,
) -> BatchEmbeddings {
    let b = BatchEmbeddings::new(queries, evidences).with_temperature(temperature);
    match declaratives {
        Some(d) => b.with_declaratives(d, alpha),
        None => BatchEmbeddings { alpha: 0.0, ..b },
    }
}

/// Returns a dict with `infonce`, `kl` and `total`.
#[pyfunction]
#[pyo3(signature = (queries, evidences, declaratives=None, alpha=objectives::DEFAULT_ALPHA, temperature=objectives::DEFAULT_TEMPERATURE))]
fn objective(
    queries: Vec<Vec<f64>>,
    evidences: Vec<Vec<f64>>,
    declaratives: Option<Vec<Vec<f64>>>,
    alpha: f64,
    temperature: f64,
) -> PyResult<std::collections::BTreeMap<&'static str, f64>> {
    let v = objectives::evaluate_objective(&batch(queries, evidences, declaratives, alpha, temperature))
        .map_err(value_err)?;
    Ok([("infonce", v.infonce), ("kl", v.kl), ("total", v.total)].into())
}

/// Gradient of the total objective as `(d_queries, d_evidences, d_declaratives)`.
#[pyfunction]
#[pyo3(signature = (queries, evidences, declaratives=None, alpha=objectives::DEFAULT_ALPHA, temperature=objectives::DEFAULT_TEMPERATURE))]
#[allow(clippy::type_complexity)]
fn objective_gradient(
    queries: Vec<Vec<f64>>,
    evidences: Vec<Vec<f64>>,
    declaratives: Option<Vec<Vec<f64>>>,
    alpha: f64,
    temperature: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    let g = objectives::combined_gradient(&batch(queries, evidences, declaratives, alpha, temperature))
        .map_err(value_err)?;
    Ok((g.queries, g.evidences, g.declaratives))
}

#[pyfunction]
fn kl_divergence(p_logits: Vec<f64>, q_logits: Vec<f64>) -> PyResult<f64> {
    objectives::kl_divergence(&p_logits, &q_logits).map_err(value_err)
}

/// Query engine over a built knowledge-graph directory and index.
#[pyclass(module = "mkgrag")]
struct Engine {
    inner: pipeline::Engine,
}

#[pymethods]
impl Engine {
    /// Load build artifacts and an index. Without `backend_url` the mock backends are used.
    #[staticmethod]
    #[pyo3(signature = (kg_dir, index_path, fixtures=None, backend_url=None, seed=0))]
    fn load(
        kg_dir: PathBuf,
        index_path: PathBuf,
        fixtures: Option<PathBuf>,
        backend_url: Option<String>,
        seed: u64,
    ) -> PyResult<Self> {
        let artifacts = Artifacts::load(&kg_dir).map_err(value_err)?;
        let index = index::VectorIndex::load(&index_path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut cfg = BackendConfig::Mock { fixtures, dim: index.dim() };
        if let Some(url) = backend_url {
            cfg.override_url(&url);
        }
        let (chat, embedder) = cfg.build().map_err(value_err)?;
        let mut inner = pipeline::Engine::new(artifacts, index, embedder, chat);
        inner.seed = seed;
        Ok(Self { inner })
    }

    /// In-memory engine over a generated planted corpus. Returns `(engine, dataset)`.
    #[staticmethod]
    #[pyo3(signature = (layout="direct", docs=50, queries=10, seed=7, dim=1024))]
    fn planted(
        py: Python<'_>,
        layout: &str,
        docs: usize,
        queries: usize,
        seed: u64,
        dim: usize,
    ) -> PyResult<(Self, PyObject)> {
        let layout = match layout {
            "direct" => PlantedLayout::Direct,
            "one_hop" | "one-hop" => PlantedLayout::OneHop,
            "noisy" => PlantedLayout::Noisy,
            other => return Err(value_err(format!("unknown layout {other:?}"))),
        };
        let set = PlantedSet::generate(&SynthOptions { docs, queries, layout, seed, ..SynthOptions::default() });
        let inner = py.allow_threads(|| set.engine(dim, 1)).map_err(value_err)?;
        Ok((Self { inner }, to_py(py, &set.dataset)?))
    }

    /// Answer one question. Returns a dict with the answer, ranked documents,
    /// expanded elements, rendered context and stage timings.
    #[pyo3(signature = (question, image_id=None, k_d=10, k_g=10, hops=1, rho=0.9, budget=4096, mode="graph"))]
    #[allow(clippy::too_many_arguments)]
    fn query(
        &self,
        py: Python<'_>,
        question: String,
        image_id: Option<String>,
        k_d: usize,
        k_g: usize,
        hops: usize,
        rho: f64,
        budget: usize,
        mode: &str,
    ) -> PyResult<PyObject> {
        let mode = self::mode(mode)?;
        let cfg = RetrievalConfig { k_d, k_g, hops, rho, budget };
        let q = Query::new(question, image_id).map_err(value_err)?;
        let out = py.allow_threads(|| self.inner.answer(&q, &cfg, mode, k_d)).map_err(value_err)?;
        let v = serde_json::json!({
            "answer": out.answer,
            "documents": out.doc_hits.iter().map(|h| serde_json::json!({"id": h.item_id, "score": h.score})).collect::<Vec<_>>(),
            "elements": out.subgraph.as_ref().map(|s| &s.expansion),
            "context": out.context.render(),
            "context_tokens": out.context.token_count,
            "timings_ms": out.timings,
        });
        to_py(py, &v)
    }

    /// Evaluate a dataset (list of record dicts) under an experiment config dict.
    /// Returns the report as a dict.
    #[pyo3(signature = (dataset, config=None))]
    fn evaluate(&self, py: Python<'_>, dataset: &Bound<'_, PyAny>, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyObject> {
        let dataset: Vec<DatasetRecord> = depythonize(dataset).map_err(value_err)?;
        let cfg: ExperimentConfig = match config {
            Some(c) => depythonize(c).map_err(value_err)?,
            None => ExperimentConfig::default(),
        };
        let (report, _) = py.allow_threads(|| harness::run_with_engine(&self.inner, &cfg, &dataset)).map_err(value_err)?;
        to_py(py, &report)
    }
}

/// Run an experiment from config and dataset files. Writes the report when `report_path` is given.
#[pyfunction]
#[pyo3(signature = (config_path, dataset_path, report_path=None))]
fn run_experiment(
    py: Python<'_>,
    config_path: PathBuf,
    dataset_path: PathBuf,
    report_path: Option<PathBuf>,
) -> PyResult<PyObject> {
    let cfg = ExperimentConfig::load(&config_path).map_err(value_err)?;
    let (report, timings) = py.allow_threads(|| harness::run_experiment(&cfg, &dataset_path)).map_err(value_err)?;
    if let Some(p) = report_path {
        harness::write_report(p, &report, &timings).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    to_py(py, &report)
}

#[pymodule]
pub fn mkgrag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<VectorIndex>()?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(parse_records, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_records, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_name, m)?)?;
    m.add_function(wrap_pyfunction!(bbox_union, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_scene_graph, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene_graph_block, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(answer_matches, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(objective_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("SCHEMA_VERSION", harness::SCHEMA_VERSION)?;
    Ok(())
}
