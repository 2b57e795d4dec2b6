//! End-to-end runs of the `mkgrag` binary on a small planted set.

use std::path::Path;
use std::process::{Command, Output};

use mkgrag_core::harness::{Report, BACKEND_URL_ENV};
use mkgrag_core::objectives::BatchEmbeddings;

fn mkgrag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkgrag"))
        .args(args)
        .current_dir(dir)
        .env_remove(BACKEND_URL_ENV)
        .output()
        .expect("spawn mkgrag")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mkgrag(dir, args);
    assert!(out.status.success(), "mkgrag {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_build_index_eval_query() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", ".", "--docs", "24", "--queries", "6", "--dim", "1024"]);
    let built = ok(
        dir,
        &[
            "build-kg", "--corpus", "corpus.jsonl", "--out", "build", "--scene-graphs", "scene_graphs", "--fixtures",
            "fixtures.json", "--max-tokens", "12", "--min-tokens", "1", "--no-headings",
        ],
    );
    let built: serde_json::Value = serde_json::from_str(&built).unwrap();
    assert_eq!(built["documents"], 24);
    assert_eq!(built["failures"], 0);
    assert!(dir.join("build/kg/doc0000.json").is_file());

    ok(dir, &["embed-index", "--kg", "build", "--out", "index.mkgi", "--dim", "1024"]);
    ok(dir, &["eval", "--config", "config.json", "--dataset", "dataset.jsonl", "--report", "report.json"]);
    let report: Report = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let first = report.run("mode=graph,k_g=1,hops=1").expect("k_g=1 run");
    assert_eq!(first.metrics.accuracy_exact, 1.0);
    assert_eq!(first.metrics.recall["R@1"], 1.0);
    assert!(dir.join("report.timings.json").is_file());

    let dataset = std::fs::read_to_string(dir.join("dataset.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(dataset.lines().next().unwrap()).unwrap();
    let answer = ok(
        dir,
        &[
            "query", "--kg", "build", "--index", "index.mkgi", "--question", rec["question"].as_str().unwrap(), "--image",
            rec["image_id"].as_str().unwrap(), "--k-g", "1", "--fixtures", "fixtures.json", "--dim", "1024",
        ],
    );
    let answer: serde_json::Value = serde_json::from_str(&answer).unwrap();
    assert_eq!(answer["answer"], rec["gold_answers"][0]);
    assert_eq!(answer["documents"][0]["id"], rec["gold_doc_id"]);
}

#[test]
fn objective_reads_batch_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("batch.mkgb");
    BatchEmbeddings::new(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]]).save(&path).unwrap();
    let out = ok(tmp.path(), &["objective", "--batch", "batch.mkgb"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["infonce"], 0.0);
    assert_eq!(v["size"], 1);
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mkgrag(tmp.path(), &["build-kg", "--corpus", "nope.jsonl", "--out", "build"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
    let out = mkgrag(tmp.path(), &["embed-index", "--kg", "missing", "--out", "i.mkgi"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kg"));
}
