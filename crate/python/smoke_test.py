"""Smoke test for the mkgrag Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
Then run:                 python python/smoke_test.py   (or pytest python/)
"""

import math
import os
import tempfile

import mkgrag


def test_records():
    raw = (
        "(``entity''|Mount Fuji|location|a volcano)\n"
        "(``relationship''|SHINKANSEN|MOUNT FUJI|passes by|7)\n"
        "(``mapping''|<object-3>|MOUNT FUJI|9)\n"
        "(``entity''|BAD|x|y|z)\n"
    )
    batch = mkgrag.parse_records(raw)
    assert [e["name"] for e in batch["entities"]] == ["MOUNT FUJI"]
    assert batch["relationships"][0]["strength"] == 7.0
    assert batch["matches"][0]["kind"] == "object"
    assert len(batch["rejects"]) == 1
    again = mkgrag.parse_records(mkgrag.serialize_records(batch))
    assert again["entities"] == batch["entities"]
    assert mkgrag.canonical_name("  shinkansen ") == "SHINKANSEN"


def test_scene_graph():
    raw = (
        "- <object-0>: train, (0.06, 0.64, 1.0, 0.77)\n"
        "- <object-3>: mountain, (0.0, 0.3, 1.0, 0.64)\n"
        "- <relation-0>: <object-3> behind <object-0>\n"
    )
    graph, dropped = mkgrag.ingest_scene_graph(raw, "img0")
    assert dropped == []
    assert len(graph["objects"]) == 2
    assert mkgrag.render_scene_graph_block(graph).startswith("- <object-0>: train")
    assert mkgrag.bbox_union([0.06, 0.64, 1.0, 0.77], [0.0, 0.3, 1.0, 0.64]) == [0.0, 0.3, 1.0, 0.77]


def test_index():
    idx = mkgrag.VectorIndex(3)
    assert idx.upsert("document", "b", [1.0, 0.0, 0.0])
    assert idx.upsert("document", "a", [1.0, 0.0, 0.0])
    assert idx.upsert("document", "c", [0.0, 1.0, 0.0])
    assert not idx.upsert("document", "bad", [1.0, 0.0])
    hits = idx.search([2.0, 0.0, 0.0], "document", 2)
    assert [h[0] for h in hits] == ["a", "b"]
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "i.mkgi")
        idx.save(path)
        back = mkgrag.VectorIndex.load(path)
    assert len(back) == 3 and back.dim == 3
    assert mkgrag.VectorIndex.from_bytes(idx.to_bytes()).search([0.0, 1.0, 0.0], "document", 1)[0][0] == "c"


def test_objectives():
    single = mkgrag.objective([[1.0, 0.0]], [[0.3, 0.7]])
    assert single["infonce"] == 0.0
    kl = mkgrag.kl_divergence([1.0, 0.0], [0.0, 1.0])
    p = [math.exp(1) / (math.e + 1), 1 / (math.e + 1)]
    assert abs(kl - (p[0] - p[1]) * 1.0) < 1e-12
    q = [[1.0, 0.2], [0.1, 1.0]]
    e = [[0.9, 0.1], [0.2, 0.8]]
    s = [[0.8, 0.3], [0.0, 1.0]]
    value = mkgrag.objective(q, e, s, alpha=2.0, temperature=0.5)
    assert abs(value["total"] - (value["infonce"] + 2.0 * value["kl"])) < 1e-12
    gq, ge, gs = mkgrag.objective_gradient(q, e, s, alpha=2.0, temperature=0.5)
    assert len(gq) == 2 and len(ge) == 2 and gs is not None


def test_planted_engine():
    engine, dataset = mkgrag.Engine.planted("direct", docs=20, queries=5, dim=1024)
    rec = dataset[0]
    out = engine.query(rec["question"], rec["image_id"], k_g=1)
    assert out["answer"] == rec["gold_answers"][0]
    assert out["documents"][0]["id"] == rec["gold_doc_id"]
    report = engine.evaluate(dataset, {"k_g": 1})
    assert report["runs"][0]["metrics"]["accuracy_exact"] == 1.0
    assert mkgrag.answer_matches("The Answer.", ["answer"])


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
