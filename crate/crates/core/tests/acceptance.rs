//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mkgrag-core --test acceptance -- --nocapture`.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mkgrag_core::extraction::MatchRecord;
use mkgrag_core::fusion::{aggregate_document_graph, apply_matchings, build_textual_subgraph, EdgeKey, Region};
use mkgrag_core::corpus::SegmentId;
use mkgrag_core::index::{IndexEntry, ItemKind, VectorIndex};
use mkgrag_core::objectives::{combined_gradient, combined_objective, infonce_loss, kl_divergence, BatchEmbeddings};
use mkgrag_core::retrieval::{compose_query_graph, expand_subgraph, ElementId, KgStore};
use mkgrag_core::synth::PlantedLayout;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// 1 ---------------------------------------------------------------------------

fn appendix_parse() -> Outcome {
    let batch = appendix_batch();
    ensure!(batch.rejects.is_empty(), "rejects: {:?}", batch.rejects);
    ensure!(batch.entities.len() == 4, "{} entities", batch.entities.len());
    let strengths: Vec<f64> = batch.relationships.iter().map(|r| r.strength).collect();
    ensure!(strengths == [9.0, 8.0, 7.0], "relationship strengths {strengths:?}");
    let (mut image, mut object, mut relation) = (0, 0, 0);
    for m in &batch.matches {
        match m {
            MatchRecord::Image { .. } => image += 1,
            MatchRecord::Object { .. } => object += 1,
            MatchRecord::Relation { .. } => relation += 1,
        }
    }
    ensure!((image, object, relation) == (1, 2, 1), "matches image/object/relation = {image}/{object}/{relation}");
    Ok("4 entities, 3 relationships (9, 8, 7), 4 matches (1 image, 2 object, 1 relation)".into())
}

// 2 ---------------------------------------------------------------------------

fn region_fusion() -> Outcome {
    let batch = appendix_batch();
    let mut frag = build_textual_subgraph(&batch, &SegmentId::new("fuji", 0)).fragment;
    let report = apply_matchings(&mut frag, &batch.matches, &appendix_scene_graph());
    ensure!(report.dropped.is_empty(), "dropped matches: {:?}", report.dropped);
    let edge = frag.edges.get(&EdgeKey::new("MOUNT FUJI", "SHINKANSEN")).ok_or("edge missing")?;
    let boxes: Vec<[f64; 4]> = edge
        .regions
        .iter()
        .filter_map(|r| match &r.region {
            Region::Bbox(b) => Some(b.coords()),
            Region::WholeImage => None,
        })
        .collect();
    ensure!(boxes == [[0.0, 0.3, 1.0, 0.77]], "edge boxes {boxes:?}");
    Ok("edge {MOUNT FUJI, SHINKANSEN} carries bbox (0.0, 0.3, 1.0, 0.77)".into())
}

// 3 ---------------------------------------------------------------------------

/// Exhaustive scan over the same stored rows: score descending, id ascending.
fn oracle_topk(rows: &[(String, Vec<f64>)], q: &[f64], k: usize) -> Vec<String> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(f64, &str)> = rows
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            ((dot / (norm(v) * qn)).clamp(-1.0, 1.0), id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

fn index_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 128;
    // Quarter steps are exact in f32; every fifth row repeats or doubles an
    // earlier one under another id so exact score ties occur.
    let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(1000);
    for i in 0..1000 {
        let v = if i % 5 == 4 {
            let (_, src) = &rows[rng.gen_range(0..i)];
            let scale = if rng.gen_bool(0.5) { 1.0 } else { 2.0 };
            src.iter().map(|x| x * scale).collect()
        } else {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-8..=8) as f64 / 4.0).collect();
            v[0] += 0.25 * (v.iter().all(|x| *x == 0.0) as u8 as f64);
            v
        };
        rows.push((format!("e{:04}", rng.gen_range(0..100_000) * 1000 + i), v));
    }
    let mut index = VectorIndex::new(dim);
    let outcome = index.upsert(rows.iter().map(|(id, v)| IndexEntry::new(ItemKind::Entity, id.clone(), v.clone(), "")));
    ensure!(outcome.errors.is_empty() && outcome.applied == 1000, "upsert {outcome:?}");
    let mut ties = 0;
    for qi in 0..50 {
        let q: Vec<f64> = if qi % 5 == 0 {
            rows[rng.gen_range(0..1000)].1.clone()
        } else {
            (0..dim).map(|_| rng.gen_range(-8..=8) as f64 / 4.0 + 0.125).collect()
        };
        let hits = index.search_topk(&q, ItemKind::Entity, 10).map_err(|e| e.to_string())?;
        let got: Vec<String> = hits.iter().map(|h| h.item_id.clone()).collect();
        let want = oracle_topk(&rows, &q, 10);
        ensure!(got == want, "query {qi}: index {got:?} vs oracle {want:?}");
        ties += hits.windows(2).filter(|w| w[0].score == w[1].score).count();
    }
    Ok(format!("50 queries x top-10 identical to exhaustive scan ({ties} tied neighbours ordered by id)"))
}

// 4 ---------------------------------------------------------------------------

fn hand_built_graph() -> (usize, Vec<(usize, usize)>) {
    // Two triangles joined by a path, a pendant chain, an isolated pair and a lone node.
    let edges = vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 6), (6, 4), (6, 7), (7, 8), (9, 10)];
    (12, edges)
}

fn check_bfs(nodes: usize, edges: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<(), String> {
    let g = graph_from_edges(nodes, edges);
    let mut scores: HashMap<ElementId, f64> = HashMap::new();
    for n in g.nodes.keys() {
        scores.insert(ElementId::Entity(n.clone()), rng.gen_range(0..20) as f64 / 20.0);
    }
    for k in g.edges.keys() {
        scores.insert(ElementId::Edge(k.clone()), rng.gen_range(0..20) as f64 / 20.0);
    }
    let mut pool: Vec<ElementId> = scores.keys().cloned().collect();
    pool.sort();
    pool.shuffle(rng);
    let seeds: Vec<(ElementId, f64)> =
        pool.into_iter().take(rng.gen_range(1..=3)).map(|e| (e.clone(), scores[&e])).collect();
    let mut previous: Option<BTreeSet<ElementId>> = None;
    for hops in 0..=4 {
        let got = expand_subgraph(&g, &seeds, hops, 0.0, &scores).expansion;
        let want = reference_expansion(&g, &seeds, hops, &scores);
        ensure!(got == want, "hops {hops}, seeds {seeds:?}: {got:?} vs {want:?}");
        let set: BTreeSet<ElementId> = got.into_iter().map(|e| e.element).collect();
        if let Some(prev) = &previous {
            ensure!(prev.is_subset(&set), "hops {hops} lost elements");
        }
        previous = Some(set);
    }
    Ok(())
}

fn bfs_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, edges) = hand_built_graph();
    for _ in 0..10 {
        check_bfs(n, &edges, &mut rng)?;
    }
    for _ in 0..100 {
        let nodes = rng.gen_range(1..=50);
        let m = rng.gen_range(0..=2 * nodes);
        let edges: Vec<(usize, usize)> = (0..m)
            .map(|_| (rng.gen_range(0..nodes), rng.gen_range(0..nodes)))
            .filter(|(a, b)| a != b)
            .collect();
        check_bfs(nodes, &edges, &mut rng)?;
    }
    Ok("12-node graph and 100 random graphs match the reference for hops 0..=4; results nest".into())
}

// 5 ---------------------------------------------------------------------------

fn merge_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for set in 0..200 {
        let docs: Vec<String> = (0..rng.gen_range(1..=4)).map(|d| format!("doc{d}")).collect();
        let mut graphs = Vec::new();
        for doc in &docs {
            let frags: Vec<_> = (0..rng.gen_range(1..=5)).map(|s| random_fragment(&mut rng, doc, s)).collect();
            let base = aggregate_document_graph(&frags, doc).to_json();
            let mut shuffled = frags.clone();
            shuffled.shuffle(&mut rng);
            ensure!(aggregate_document_graph(&shuffled, doc).to_json() == base, "set {set}: aggregate order-sensitive");
            let doubled: Vec<_> = frags.iter().chain(&frags).cloned().collect();
            ensure!(aggregate_document_graph(&doubled, doc).to_json() == base, "set {set}: aggregate not idempotent");
            graphs.push(aggregate_document_graph(&frags, doc));
        }
        let store = KgStore::from_graphs(graphs);
        let base = compose_query_graph(&store, &docs).map_err(|e| e.to_string())?.canonical_json();
        let mut ids = docs.clone();
        ids.shuffle(&mut rng);
        ids.extend(docs.iter().cloned());
        ensure!(
            compose_query_graph(&store, &ids).map_err(|e| e.to_string())?.canonical_json() == base,
            "set {set}: compose order- or repeat-sensitive"
        );
    }
    Ok("200 fragment sets: permuted and repeated inputs serialize identically".into())
}

// 6 ---------------------------------------------------------------------------

fn planted_end_to_end() -> Outcome {
    let set = planted(PlantedLayout::Direct);
    ensure!(set.documents.len() == 200 && set.dataset.len() == 50, "planted set size");
    let report = planted_report(&set, &end_to_end_config());
    let run = &report.runs[0];
    let m = &run.metrics;
    ensure!(m.recall["R@1"] == 1.0, "R@1 = {}", m.recall["R@1"]);
    let off: Vec<&str> = run.records.iter().filter(|r| r.gold_element_rank != Some(1)).map(|r| r.id.as_str()).collect();
    ensure!(off.is_empty(), "gold element not ranked first for {off:?}");
    ensure!(m.accuracy_exact == 1.0, "exact accuracy {}", m.accuracy_exact);
    Ok("200 docs / 50 queries: R@1 = 1.00, gold element rank 1 throughout, exact accuracy = 1.00".into())
}

// 7 ---------------------------------------------------------------------------

fn random_batch(rng: &mut ChaCha8Rng, b: usize, dim: usize) -> BatchEmbeddings {
    let mut rows = || (0..b).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
    let (q, e, s) = (rows(), rows(), rows());
    BatchEmbeddings::new(q, e).with_declaratives(s, 2.0).with_temperature(0.5)
}

fn objectives() -> Outcome {
    let one = BatchEmbeddings::new(vec![vec![0.3, -0.2, 0.9]], vec![vec![0.1, 0.4, -0.5]]);
    let l = infonce_loss(&one, 0).map_err(|e| e.to_string())?;
    ensure!(l == 0.0, "InfoNCE at B = 1 is {l}");
    let same = kl_divergence(&[0.2, -1.0, 3.0], &[0.2, -1.0, 3.0]).map_err(|e| e.to_string())?;
    ensure!(same.abs() <= 1e-12, "KL(identical) = {same}");
    let kl = kl_divergence(&[0.0, 3f64.ln()], &[0.0, 0.0]).map_err(|e| e.to_string())?;
    let closed = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    ensure!((kl - closed).abs() <= 1e-6, "KL = {kl}, closed form {closed}");
    ensure!(format!("{kl:.5}") == "0.13081", "KL = {kl} does not round to 0.13081");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 4, 8);
        let grad = combined_gradient(&batch).map_err(|e| e.to_string())?;
        let analytic = [&grad.queries, &grad.evidences, grad.declaratives.as_ref().unwrap()];
        for (which, g) in analytic.iter().enumerate() {
            for i in 0..4 {
                for d in 0..8 {
                    let eval = |delta: f64| {
                        let mut b = batch.clone();
                        let target = match which {
                            0 => &mut b.queries,
                            1 => &mut b.evidences,
                            _ => b.declaratives.as_mut().unwrap(),
                        };
                        target[i][d] += delta;
                        combined_objective(&b).unwrap()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let diff = (numeric - g[i][d]).abs();
                    worst = worst.max(diff);
                    ensure!(diff <= 1e-4, "gradient mismatch {diff:e} at tensor {which}, row {i}, dim {d}");
                }
            }
        }
    }
    Ok(format!("InfoNCE(B=1) = 0, KL(identical) = {same:e}, KL example = {kl:.7}, max gradient error {worst:.1e}"))
}

// 8 ---------------------------------------------------------------------------

fn ablation_trends() -> Outcome {
    let direct = planted_report(&planted(PlantedLayout::Direct), &k_g_sweep_config());
    let recalls: Vec<f64> = direct.runs.iter().map(|r| r.metrics.gold_element_recall.unwrap_or(0.0)).collect();
    ensure!(recalls.len() == 4 && recalls.windows(2).all(|w| w[0] <= w[1]), "gold-element recall over k_g: {recalls:?}");

    let one_hop = planted_report(&planted(PlantedLayout::OneHop), &hop_sweep_config());
    let acc = |label: &str| one_hop.run(label).map(|r| r.metrics.accuracy_exact).ok_or(format!("missing run {label}"));
    let (l0, l1) = (acc("mode=graph,k_g=1,hops=0")?, acc("mode=graph,k_g=1,hops=1")?);
    ensure!(l1 > l0, "one-hop accuracy l=1 {l1} vs l=0 {l0}");

    let noisy = planted_report(&planted(PlantedLayout::Noisy), &mode_sweep_config());
    let non_gold = |label: &str| {
        noisy.run(label).and_then(|r| r.metrics.non_gold_segments).ok_or(format!("missing run {label}"))
    };
    let (graph, chunk) = (non_gold("mode=graph,k_g=10,hops=1")?, non_gold("mode=chunk,k_g=10,hops=1")?);
    ensure!(graph < chunk, "non-gold segments graph {graph} vs chunk {chunk}");
    Ok(format!(
        "recall over k_g {{1,5,10,20}} = {recalls:?}; one-hop accuracy l=0 {l0:.2} < l=1 {l1:.2}; non-gold segments graph {graph} < chunk {chunk}"
    ))
}

// 10 --------------------------------------------------------------------------

fn determinism() -> Outcome {
    let first = planted_report(&planted(PlantedLayout::Direct), &end_to_end_config()).to_json();
    let second = planted_report(&planted(PlantedLayout::Direct), &end_to_end_config()).to_json();
    ensure!(first == second, "reports differ");
    Ok(format!("two runs produce byte-identical reports ({} bytes)", first.len()))
}

// -----------------------------------------------------------------------------

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

#[test]
fn acceptance_suite() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "appendix parser fidelity", limit: secs(1), check: appendix_parse },
        Criterion { id: 2, name: "region fusion", limit: secs(1), check: region_fusion },
        Criterion { id: 3, name: "index oracle", limit: secs(2), check: index_oracle },
        Criterion { id: 4, name: "BFS oracle", limit: secs(5), check: bfs_oracle },
        Criterion { id: 5, name: "merge algebra", limit: secs(5), check: merge_algebra },
        Criterion { id: 6, name: "planted end-to-end", limit: secs(10), check: planted_end_to_end },
        Criterion { id: 7, name: "objectives", limit: secs(10), check: objectives },
        Criterion { id: 8, name: "ablation trends", limit: secs(30), check: ablation_trends },
        Criterion { id: 10, name: "determinism", limit: secs(20), check: determinism },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; took {elapsed:.2?} > {:?}", c.limit)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("{tag} criterion {:>2} {}: {detail} [{elapsed:.2?}, limit {:?}]", c.id, c.name, c.limit);
        if outcome.is_err() {
            failed.push(c.id);
        }
    }
    println!(
        "DECLARED criterion  9 full-scale benchmark numbers: not reproducible offline; needs the 2M-page knowledge base and trained 7-11B models"
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
