"""Smoke test for the groundset Python module.

Build and install first:
    maturin develop -m crates/python/Cargo.toml
"""

import json
import pathlib
import tempfile

import groundset

ROOT = pathlib.Path(__file__).resolve().parent.parent
TOY = ROOT / "crates" / "core" / "fixtures" / "toy"


def main():
    assert groundset.canonicalize("  plan   a trip ") == "plan a trip"
    assert len(groundset.content_hash("")) == 64
    assert abs(groundset.similarity("plan a trip to Yazd", "plan a trip to Shiraz") - 0.8) < 1e-12
    assert groundset.dedup_filter(["plan a trip to Shiraz"], ["plan a trip to Yazd"], 0.7) == []
    assert groundset.edit_ratio("a b c", "x y z w") == 1.0
    assert groundset.rule_filter("<p>Hello <b>world</b></p>") == "Hello world"
    assert groundset.chunk_document("a b c d e", 2, 0) == ["a b", "c d", "e"]

    index = groundset.CorpusIndex([("d1", "saffron rice with tahdig"), ("d2", "river bridge")], 64, 8)
    hits = index.search("saffron rice", top_k=3)
    assert [h[0] for h in hits] == ["d1"], hits

    seeds = groundset.load_seeds(str(TOY / "seeds.jsonl"))
    assert len(seeds) == 10

    with tempfile.TemporaryDirectory() as out:
        report = groundset.run(str(TOY / "config.toml"), out=out, timestamp="2025-01-01T00:00:00Z")
        assert report["records"] == {"1": 30}, report["records"]
        assert groundset.stage_summary(out) == {"stage_counts": {1: 30}, "total": 30}
        edit = groundset.run_edit(str(TOY / "config.toml"), out=out, timestamp="2025-01-01T00:00:00Z")
        assert (edit["preferences"], edit["quarantined"]) == (15, 5)
        first = json.loads(pathlib.Path(out, "preferences.jsonl").read_text().splitlines()[0])
        assert set(first) == {"prompt", "rejected", "chosen", "edit_ratio", "context_ids"}

    try:
        groundset.run(str(TOY / "config.toml"), out=tempfile.mkdtemp(), resume=True)
    except groundset.ConfigError as e:
        assert "checkpoint" in str(e)
    else:
        raise AssertionError("resume without checkpoint should fail")

    print("smoke test passed")


if __name__ == "__main__":
    main()
