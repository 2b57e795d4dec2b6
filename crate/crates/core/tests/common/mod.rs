//! Shared fixtures and reference oracles for integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;

use mkgrag_core::corpus::SegmentId;
use mkgrag_core::extraction::{parse_records, RecordBatch};
use mkgrag_core::fusion::{apply_matchings, build_textual_subgraph, KgFragment};
use mkgrag_core::harness::{run_with_engine, ExperimentConfig, Report, Sweep};
use mkgrag_core::pipeline::RetrievalMode;
use mkgrag_core::retrieval::{ElementId, ExpandedElement};
use mkgrag_core::scenegraph::{ingest_scene_graph, VisualGraph};
use mkgrag_core::synth::{PlantedLayout, PlantedSet, SynthOptions};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

/// Records and matches of the Appendix matching example, parsed together.
pub fn appendix_batch() -> RecordBatch {
    parse_records(&format!("{}\n{}", fixture("appendix_records.txt"), fixture("appendix_matches.txt")))
}

pub fn appendix_scene_graph() -> VisualGraph {
    ingest_scene_graph(&fixture("appendix_scene_graph.txt"), "fuji").expect("appendix scene graph").graph
}

// ---------------------------------------------------------------------------
// Random fragments

const NAMES: [&str; 8] = ["ALPHA", "BETA", "GAMMA", "DELTA", "EPSILON", "ZETA", "ETA", "THETA"];
const TYPES: [&str; 3] = ["person", "place", ""];

pub fn random_scene_graph(rng: &mut impl Rng, image_id: &str) -> VisualGraph {
    let n = rng.gen_range(1..=4);
    let mut block = String::new();
    for i in 0..n {
        let x1 = rng.gen_range(0..5) as f64 / 10.0;
        let y1 = rng.gen_range(0..5) as f64 / 10.0;
        let x2 = x1 + rng.gen_range(1..=5) as f64 / 10.0;
        let y2 = y1 + rng.gen_range(1..=5) as f64 / 10.0;
        block.push_str(&format!("- <object-{i}>: thing, ({x1}, {y1}, {x2}, {y2})\n"));
    }
    for r in 0..rng.gen_range(0..=3) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            block.push_str(&format!("- <relation-{r}>: <object-{a}> near <object-{b}>\n"));
        }
    }
    ingest_scene_graph(&block, image_id).expect("random scene graph").graph
}

/// One segment's fragment: random records over a small name pool, with
/// random matchings against a random scene graph.
pub fn random_fragment(rng: &mut impl Rng, doc: &str, seg: usize) -> KgFragment {
    let mut lines = Vec::new();
    let count = rng.gen_range(1..=5);
    let names: Vec<&str> = NAMES.choose_multiple(rng, count).copied().collect();
    for n in &names {
        let desc = format!("d{}", rng.gen_range(0..4));
        lines.push(format!("(\"entity\"|{n}|{}|{desc})", TYPES.choose(rng).unwrap()));
    }
    for _ in 0..rng.gen_range(0..=4) {
        let (a, b) = (names.choose(rng).unwrap(), names.choose(rng).unwrap());
        if a != b {
            lines.push(format!("(\"relationship\"|{a}|{b}|r{}|{})", rng.gen_range(0..3), rng.gen_range(0..=10)));
        }
    }
    let image = format!("{doc}-img{}", rng.gen_range(0..2));
    let vg = random_scene_graph(rng, &image);
    for _ in 0..rng.gen_range(0..=3) {
        let n = names.choose(rng).unwrap();
        let s = rng.gen_range(0..=10);
        match rng.gen_range(0..3) {
            0 => lines.push(format!("(\"matching\"|<image>|{n}|{s})")),
            1 => lines.push(format!("(\"matching\"|<object-{}>|{n}|{s})", rng.gen_range(0..vg.objects.len()))),
            _ => {
                let (a, b) = (names.choose(rng).unwrap(), names.choose(rng).unwrap());
                lines.push(format!("(\"matching\"|<relation-{}>|{a}|{b}|{s})", rng.gen_range(0..3)));
            }
        }
    }
    let batch = parse_records(&lines.join("\n"));
    let mut frag = build_textual_subgraph(&batch, &SegmentId::new(doc, seg)).fragment;
    apply_matchings(&mut frag, &batch.matches, &vg);
    frag
}

// ---------------------------------------------------------------------------
// Reference BFS (rho = 0)

/// Independent breadth-first oracle for rho = 0: distances from the seed
/// nodes, nodes within `hops`, edges with an endpoint closer than `hops`.
pub fn reference_expansion(
    g: &KgFragment,
    seeds: &[(ElementId, f64)],
    hops: usize,
    scores: &HashMap<ElementId, f64>,
) -> Vec<ExpandedElement> {
    let mut hop_of: BTreeMap<ElementId, usize> = seeds.iter().map(|(e, _)| (e.clone(), 0)).collect();
    if hops > 0 {
        let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for key in g.edges.keys() {
            let (a, b) = key.endpoints();
            adj.entry(a).or_default().insert(b);
            adj.entry(b).or_default().insert(a);
        }
        let mut dist: BTreeMap<String, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for (el, _) in seeds {
            let starts: Vec<String> = match el {
                ElementId::Entity(n) => vec![n.clone()],
                ElementId::Edge(k) => {
                    let (a, b) = k.endpoints();
                    vec![a.to_string(), b.to_string()]
                }
            };
            for n in starts {
                if g.nodes.contains_key(&n) && !dist.contains_key(&n) {
                    dist.insert(n.clone(), 0);
                    queue.push_back(n);
                }
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d == hops {
                continue;
            }
            for v in adj.get(u.as_str()).into_iter().flatten() {
                if !dist.contains_key(*v) {
                    dist.insert(v.to_string(), d + 1);
                    queue.push_back(v.to_string());
                }
            }
        }
        for (n, d) in &dist {
            hop_of.entry(ElementId::Entity(n.clone())).or_insert(*d);
        }
        for key in g.edges.keys() {
            let (a, b) = key.endpoints();
            let near = [a, b].iter().filter_map(|n| dist.get(*n)).copied().min();
            if let Some(d) = near.filter(|&d| d < hops) {
                hop_of.entry(ElementId::Edge(key.clone())).or_insert(d + 1);
            }
        }
    }
    let mut out: Vec<ExpandedElement> = hop_of
        .into_iter()
        .map(|(element, hop)| {
            let score = scores.get(&element).copied().unwrap_or(f64::NEG_INFINITY);
            ExpandedElement { element, hop, score }
        })
        .collect();
    out.sort_by(|a, b| a.hop.cmp(&b.hop).then(b.score.total_cmp(&a.score)).then_with(|| a.element.cmp(&b.element)));
    out
}

/// Builds a graph from an edge list; every node gets an entity record.
pub fn graph_from_edges(nodes: usize, edges: &[(usize, usize)]) -> KgFragment {
    let mut lines: Vec<String> = (0..nodes).map(|i| format!("(\"entity\"|N{i:02}|t|node {i})")).collect();
    for (a, b) in edges {
        lines.push(format!("(\"relationship\"|N{a:02}|N{b:02}|link|5)"));
    }
    build_textual_subgraph(&parse_records(&lines.join("\n")), &SegmentId::new("g", 0)).fragment
}

// ---------------------------------------------------------------------------
// Planted runs

pub const PLANTED_DIM: usize = 4096;
pub const PLANTED_PARALLELISM: usize = 4;

pub fn planted(layout: PlantedLayout) -> PlantedSet {
    PlantedSet::generate(&SynthOptions { layout, ..SynthOptions::default() })
}

pub fn planted_report(set: &PlantedSet, cfg: &ExperimentConfig) -> Report {
    let engine = set.engine(PLANTED_DIM, PLANTED_PARALLELISM).expect("planted engine");
    run_with_engine(&engine, cfg, &set.dataset).expect("planted run").0
}

/// Defaults with one gold element seed per query.
pub fn end_to_end_config() -> ExperimentConfig {
    ExperimentConfig { k_g: 1, parallelism: PLANTED_PARALLELISM, ..ExperimentConfig::default() }
}

pub fn k_g_sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        parallelism: PLANTED_PARALLELISM,
        sweep: Some(Sweep { k_g: vec![1, 5, 10, 20], ..Sweep::default() }),
        ..ExperimentConfig::default()
    }
}

/// Single seed, every neighbor admitted, hops 0 and 1.
pub fn hop_sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        k_g: 1,
        rho: 0.0,
        parallelism: PLANTED_PARALLELISM,
        sweep: Some(Sweep { hops: vec![0, 1], ..Sweep::default() }),
        ..ExperimentConfig::default()
    }
}

pub fn mode_sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        parallelism: PLANTED_PARALLELISM,
        sweep: Some(Sweep { mode: vec![RetrievalMode::Graph, RetrievalMode::Chunk], ..Sweep::default() }),
        ..ExperimentConfig::default()
    }
}
