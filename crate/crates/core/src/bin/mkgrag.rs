use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mkgrag_core::backends::{FixtureFile, MockChatBackend, MockEmbeddingBackend, MockServer, DEFAULT_DIM};
use mkgrag_core::corpus::{ChunkPolicy, Corpus};
use mkgrag_core::extraction::PromptSet;
use mkgrag_core::harness::{run_experiment, write_report, BackendConfig, ExperimentConfig, Sweep, BACKEND_URL_ENV};
use mkgrag_core::index::VectorIndex;
use mkgrag_core::objectives::{evaluate_objective, BatchEmbeddings};
use mkgrag_core::pipeline::{build_corpus, build_index, write_build, Artifacts, BuildOptions, Engine, RetrievalMode, SceneGraphSource};
use mkgrag_core::retrieval::{Query, RetrievalConfig};
use mkgrag_core::synth::{planted_policy, PlantedLayout, PlantedSet, SynthOptions};

#[derive(Parser)]
#[command(name = "mkgrag", version, about = "Multimodal knowledge-graph RAG: build, index, query, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a corpus and build one multimodal knowledge graph per document.
    BuildKg(BuildKgArgs),
    /// Embed documents, segments, entities and edges of a build into an index file.
    EmbedIndex(EmbedIndexArgs),
    /// Answer one question against a build and its index.
    Query(QueryArgs),
    /// Run an experiment config over a dataset and write a report.
    Eval(EvalArgs),
    /// Serve the mock backends over HTTP.
    ServeMock(ServeMockArgs),
    /// Evaluate the retriever objective on a stored embedding batch.
    Objective(ObjectiveArgs),
    /// Write a planted-evidence corpus, fixtures, dataset and eval config.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Native backend endpoint; replaces the mock backends.
    #[arg(long, env = BACKEND_URL_ENV)]
    backend_url: Option<String>,
    /// Mock chat fixtures (JSON).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Embedding dimension.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
}

impl BackendArgs {
    fn config(&self) -> BackendConfig {
        let mut cfg = BackendConfig::Mock { fixtures: self.fixtures.clone(), dim: self.dim };
        if let Some(url) = &self.backend_url {
            cfg.override_url(url);
        }
        cfg
    }
}

#[derive(Args)]
struct BuildKgArgs {
    /// Corpus JSONL, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output build directory.
    #[arg(long)]
    out: PathBuf,
    /// Directory of `<image_id>.json` or `<image_id>.txt` scene graphs.
    #[arg(long)]
    scene_graphs: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// In-context matching exemplar files, in order.
    #[arg(long = "exemplar")]
    exemplars: Vec<PathBuf>,
    #[arg(long, default_value_t = ChunkPolicy::default().max_tokens)]
    max_tokens: usize,
    #[arg(long, default_value_t = ChunkPolicy::default().min_tokens)]
    min_tokens: usize,
    /// Do not prefix section headings to segments.
    #[arg(long)]
    no_headings: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EmbedIndexArgs {
    /// Build directory written by `build-kg`.
    #[arg(long)]
    kg: PathBuf,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Graph,
    Chunk,
}

impl From<ModeArg> for RetrievalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Graph => RetrievalMode::Graph,
            ModeArg::Chunk => RetrievalMode::Chunk,
        }
    }
}

#[derive(Args)]
struct QueryArgs {
    /// Build directory written by `build-kg`.
    #[arg(long)]
    kg: PathBuf,
    /// Index file written by `embed-index`.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    question: String,
    /// Image id of the query image.
    #[arg(long)]
    image: Option<String>,
    #[arg(long, default_value_t = RetrievalConfig::default().k_d)]
    k_d: usize,
    #[arg(long, default_value_t = RetrievalConfig::default().k_g)]
    k_g: usize,
    #[arg(long, default_value_t = RetrievalConfig::default().hops)]
    hops: usize,
    #[arg(long, default_value_t = RetrievalConfig::default().rho)]
    rho: f64,
    #[arg(long, default_value_t = RetrievalConfig::default().budget)]
    budget: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Graph)]
    mode: ModeArg,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// Report path; timings go next to it as `<stem>.timings.json`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ServeMockArgs {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
}

#[derive(Args)]
struct ObjectiveArgs {
    /// Embedding batch file (MKGB).
    #[arg(long)]
    batch: PathBuf,
    /// Override the stored temperature.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Direct,
    OneHop,
    Noisy,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = LayoutArg::Direct)]
    layout: LayoutArg,
    #[arg(long, default_value_t = 200)]
    docs: usize,
    #[arg(long, default_value_t = 50)]
    queries: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Embedding dimension written into the eval config.
    #[arg(long, default_value_t = 4096)]
    dim: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::BuildKg(a) => build_kg(a),
        Command::EmbedIndex(a) => embed_index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::ServeMock(a) => serve_mock(a),
        Command::Objective(a) => objective(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_prompts(dir: Option<&Path>) -> Result<PromptSet> {
    match dir {
        Some(d) => PromptSet::load_dir(d).with_context(|| format!("loading prompts from {}", d.display())),
        None => Ok(PromptSet::default()),
    }
}

fn build_kg(a: BuildKgArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    for reject in corpus.rejects() {
        log::warn!("corpus line skipped: {reject:?}");
    }
    let policy = ChunkPolicy { max_tokens: a.max_tokens, min_tokens: a.min_tokens, include_headings: !a.no_headings };
    policy.validate()?;
    let exemplars = a
        .exemplars
        .iter()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading exemplar {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let opts = BuildOptions { policy, prompts: load_prompts(a.prompts.as_deref())?, exemplars, seed: a.seed, parallelism: a.parallelism };
    let scene_graphs = a.scene_graphs.map_or(SceneGraphSource::None, SceneGraphSource::Dir);
    let (chat, _) = a.backend.config().build()?;
    let build = build_corpus(&corpus, &opts, chat.as_ref(), &scene_graphs);
    write_build(&a.out, &corpus, &build)?;
    for (doc, err) in &build.failures {
        eprintln!("failed: {doc}: {err}");
    }
    let (entities, edges) = build.docs.iter().fold((0, 0), |(n, e), d| (n + d.stats.entities, e + d.stats.edges));
    println!(
        "{}",
        json!({"documents": build.docs.len(), "failures": build.failures.len(), "entities": entities, "edges": edges, "out": a.out})
    );
    Ok(())
}

fn embed_index(a: EmbedIndexArgs) -> Result<()> {
    let artifacts = Artifacts::load(&a.kg)?;
    let (_, embedder) = a.backend.config().build()?;
    let index = build_index(&artifacts, embedder.as_ref(), a.parallelism)?;
    index.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", json!({"items": index.len(), "dim": index.dim(), "out": a.out}));
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let artifacts = Artifacts::load(&a.kg)?;
    let index = VectorIndex::load(&a.index).with_context(|| format!("loading index {}", a.index.display()))?;
    let (chat, embedder) = a.backend.config().build()?;
    if embedder.dim() != index.dim() {
        bail!("backend dim {} differs from index dim {}; pass --dim {}", embedder.dim(), index.dim(), index.dim());
    }
    let mut engine = Engine::new(artifacts, index, embedder, chat);
    engine.prompts = load_prompts(a.prompts.as_deref())?;
    engine.seed = a.seed;
    let cfg = RetrievalConfig { k_d: a.k_d, k_g: a.k_g, hops: a.hops, rho: a.rho, budget: a.budget };
    let q = Query::new(a.question, a.image)?;
    let out = engine.answer(&q, &cfg, a.mode.into(), cfg.k_d)?;
    let report = json!({
        "answer": out.answer,
        "documents": out.doc_hits.iter().map(|h| json!({"id": h.item_id, "score": h.score})).collect::<Vec<_>>(),
        "elements": out.subgraph.as_ref().map(|s| &s.expansion),
        "context": out.context.render(),
        "context_tokens": out.context.token_count,
        "timings_ms": out.timings,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let (report, timings) = run_experiment(&cfg, &a.dataset)?;
    write_report(&a.report, &report, &timings)?;
    for run in &report.runs {
        let m = &run.metrics;
        println!(
            "{}: queries={} exact={:.4} contains={:.4} R@1={:.4} R@10={:.4}",
            run.label, m.queries, m.accuracy_exact, m.accuracy_contains, m.recall["R@1"], m.recall["R@10"]
        );
    }
    Ok(())
}

fn serve_mock(a: ServeMockArgs) -> Result<()> {
    let chat = match &a.fixtures {
        Some(p) => MockChatBackend::from_fixtures(FixtureFile::load(p)?),
        None => MockChatBackend::new(),
    };
    let server = MockServer::start(&a.addr, chat, MockEmbeddingBackend::new(a.dim))?;
    println!("{}", server.url());
    server.join();
    Ok(())
}

fn objective(a: ObjectiveArgs) -> Result<()> {
    let mut batch = BatchEmbeddings::load(&a.batch).with_context(|| format!("loading {}", a.batch.display()))?;
    if let Some(t) = a.temperature {
        batch = batch.with_temperature(t);
    }
    let v = evaluate_objective(&batch)?;
    println!(
        "{}",
        json!({"size": batch.size(), "dim": batch.dim(), "temperature": batch.temperature, "alpha": batch.alpha,
               "infonce": v.infonce, "kl": v.kl, "total": v.total})
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let layout = match a.layout {
        LayoutArg::Direct => PlantedLayout::Direct,
        LayoutArg::OneHop => PlantedLayout::OneHop,
        LayoutArg::Noisy => PlantedLayout::Noisy,
    };
    let set = PlantedSet::generate(&SynthOptions { docs: a.docs, queries: a.queries, layout, seed: a.seed, ..SynthOptions::default() });
    set.write(&a.out)?;
    let mut cfg = ExperimentConfig {
        k_g: 1,
        chunk_policy: planted_policy(),
        backend: BackendConfig::Mock { fixtures: Some("fixtures.json".into()), dim: a.dim },
        artifacts: Some("build".into()),
        index: Some("index.mkgi".into()),
        ..ExperimentConfig::default()
    };
    match layout {
        PlantedLayout::Direct => cfg.sweep = Some(Sweep { k_g: vec![1, 5, 10, 20], ..Sweep::default() }),
        PlantedLayout::OneHop => {
            cfg.rho = 0.0;
            cfg.sweep = Some(Sweep { hops: vec![0, 1], ..Sweep::default() });
        }
        PlantedLayout::Noisy => {
            cfg.k_g = RetrievalConfig::default().k_g;
            cfg.sweep = Some(Sweep { mode: vec![RetrievalMode::Graph, RetrievalMode::Chunk], ..Sweep::default() });
        }
    }
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let p = planted_policy();
    println!("wrote {} documents and {} queries to {}", set.documents.len(), set.dataset.len(), a.out.display());
    println!(
        "build with: mkgrag build-kg --corpus corpus.jsonl --out build --scene-graphs scene_graphs --fixtures fixtures.json \
         --max-tokens {} --min-tokens {} --no-headings",
        p.max_tokens, p.min_tokens
    );
    Ok(())
}
