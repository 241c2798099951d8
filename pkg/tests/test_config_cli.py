from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from kgembed.cli import EXIT_BACKEND, EXIT_INPUT, EXIT_OK, EXIT_VALIDATION, main
from kgembed.config import ConfigError, apply_overrides, load_config, make_embedder
from kgembed.embed import MockEmbedder, PrecomputedEmbeddings

from conftest import PACKAGE_DATA, TESTS_DATA


def run(config: Path, *args: str) -> int:
    return main([args[0], "-c", str(config), *args[1:]])


# ---------------------------------------------------------------------------
# config


def test_overrides_use_toml_literals():
    raw = apply_overrides({"pairgen": {"m_a": 2}}, ["pairgen.m_a=5", "eval.ks=[1, 5]", "log_level=DEBUG"])
    assert raw == {"pairgen": {"m_a": 5}, "eval": {"ks": [1, 5]}, "log_level": "DEBUG"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])


def test_relative_paths_resolve_against_config(fixture_config):
    cfg = load_config(fixture_config)
    assert cfg.corpora[0].path == fixture_config.parent / "fixture_corpus.jsonl"
    assert cfg.output_dir == fixture_config.parent / "out"
    assert cfg.pairgen.rng_seed == 7 and cfg.corpora[0].augment_to_greek


def test_config_hash_ignores_output_dir(fixture_config):
    a = load_config(fixture_config)
    b = load_config(fixture_config, ["output_dir='elsewhere'"])
    c = load_config(fixture_config, ["pairgen.rng_seed=8"])
    assert a.config_hash() == b.config_hash() != c.config_hash()


@pytest.mark.parametrize("override", [
    "backends.embedder.kind='gpu'",
    "backends.extractor.kind='remote'",
    "backends.reranker.kind='mock'",
    "eval.ks=[10, 3]",
    "pairgen.m_a=-1",
    "chunking.chunk_size=0",
])
def test_invalid_configs(fixture_config, override):
    with pytest.raises(ConfigError):
        load_config(fixture_config, [override])


def test_embedder_factory(fixture_config, tmp_path):
    assert isinstance(make_embedder(load_config(fixture_config).backend("embedder")), MockEmbedder)
    (tmp_path / "v.jsonl").write_text('{"id": "a", "vector": [1.0, 0.0]}\n')
    cfg = load_config(fixture_config, ["backends.embedder={kind='file', path='" + str(tmp_path / "v.jsonl") + "'}"])
    assert isinstance(make_embedder(cfg.backend("embedder")), PrecomputedEmbeddings)


# ---------------------------------------------------------------------------
# pipeline


def test_fixture_pipeline_counts(fixture_config):
    out = fixture_config.parent / "out"
    for step in ("ingest", "build-kg", "gen-pairs", "augment", "export-dataset", "report"):
        assert run(fixture_config, step) == EXIT_OK, step
    native = json.loads((out / "pairs_native.jsonl.manifest.json").read_text())
    augmented = json.loads((out / "pairs_augmented.jsonl.manifest.json").read_text())
    assert native["counts"]["total"] == 16
    assert augmented["counts"]["by_origin"] == {"native": 16, "translated": 16}
    assert native["config_hash"] == load_config(fixture_config).config_hash()
    assert set(native["inputs"]) == {"nodes.jsonl", "edges.jsonl"}
    rows = [json.loads(line) for line in (out / "train_pairs.jsonl").read_text().splitlines()]
    assert len(rows) == 32 and set(rows[0]) == {"anchor", "positive"}
    assert "16 pairs" in (out / "report.txt").read_text()
    logs = [json.loads(line) for line in (out / "logs.jsonl").read_text().splitlines()]
    assert logs and {"time", "level", "message"} <= set(logs[0])


def test_sample_corpus_golden_counts(sample_config):
    assert run(sample_config, "build-kg") == EXIT_OK
    summary = json.loads((sample_config.parent / "kgembed-out" / "kg_summary.json").read_text())
    golden = json.loads((TESTS_DATA / "golden_sample_kg_counts.json").read_text())
    assert {k: summary[k] for k in golden} == golden
    # the mock extractor keeps one atomic fact per sentence
    bodies = [json.loads(line)["body"] for name in ("sample_corpus_el.jsonl", "sample_corpus_en.jsonl")
              for line in (PACKAGE_DATA / name).read_text(encoding="utf-8").splitlines() if line.strip()]
    sentences = sum(len([s for s in re.split(r"(?<=[.!?;])\s+", b.strip()) if s]) for b in bodies)
    assert summary["nodes"]["AtomicFact"] == sentences


def test_rerun_is_byte_identical(fixture_config):
    out = fixture_config.parent / "out"
    assert run(fixture_config, "build-kg") == EXIT_OK
    first = (out / "kg" / "nodes.jsonl").read_bytes(), (out / "kg" / "edges.jsonl").read_bytes()
    assert run(fixture_config, "build-kg", "--jobs", "3") == EXIT_OK
    assert first == ((out / "kg" / "nodes.jsonl").read_bytes(), (out / "kg" / "edges.jsonl").read_bytes())


def test_missing_corpus_leaves_no_graph(fixture_config, capsys):
    (fixture_config.parent / "fixture_corpus.jsonl").unlink()
    assert run(fixture_config, "build-kg") == EXIT_INPUT
    assert not (fixture_config.parent / "out" / "kg").exists()
    assert "does not exist" in capsys.readouterr().err


@pytest.mark.parametrize("step,artifact", [("gen-pairs", "knowledge graph"), ("augment", "native dataset"),
                                           ("export-dataset", "dataset")])
def test_missing_prerequisite_is_named(fixture_config, capsys, step, artifact):
    assert run(fixture_config, step) == EXIT_INPUT
    assert f"missing {artifact}" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("output_dir = [unclosed")
    assert main(["ingest", "-c", str(tmp_path / "c.toml")]) == EXIT_INPUT


def test_extraction_outage_exits_with_backend_code(fixture_config, http_service):
    service = http_service(lambda payload: (500, {"error": "down"}))
    code = run(fixture_config, "build-kg", "--set", f"backends.extractor={{kind='remote', endpoint='{service.url}'}}",
               "--set", "retry.attempts=2")
    assert code == EXIT_BACKEND
    summary = json.loads((fixture_config.parent / "out" / "kg_summary.json").read_text())
    assert summary["degraded_chunks"] == 4
    assert len(service.requests) == 8


def test_evaluate_self_retrieval_and_stats(fixture_config, capsys):
    out = fixture_config.parent / "out"
    corpus, queries = str(TESTS_DATA / "self_corpus.jsonl"), str(TESTS_DATA / "self_queries.jsonl")
    for dataset in ("self-a", "self-b"):
        for dim in (64, 16):
            code = run(fixture_config, "evaluate", "--corpus", corpus, "--queries", queries,
                       "--model", f"mock{dim}", "--dataset", dataset, "--set", f"backends.embedder.dim={dim}")
            assert code == EXIT_OK
    report = json.loads((out / "reports" / "mock64__self-a.json").read_text())
    assert report["metrics"] == {"Acc@3": 100.0, "Acc@10": 100.0, "NDCG@3": 100.0, "NDCG@10": 100.0}
    capsys.readouterr()
    assert run(fixture_config, "stats", str(out / "reports")) == EXIT_OK
    stats = json.loads((out / "stats" / "stats.json").read_text())
    assert set(stats) == {"Acc@3", "NDCG@3"}
    assert "Model" in capsys.readouterr().out


def test_index_then_file_backend(fixture_config):
    out = fixture_config.parent / "out"
    corpus, queries = str(TESTS_DATA / "self_corpus.jsonl"), str(TESTS_DATA / "self_queries.jsonl")
    assert run(fixture_config, "index", "--corpus", corpus, "--queries", queries) == EXIT_OK
    vectors = out / "vectors" / "self_corpus.jsonl"
    assert len(vectors.read_text().splitlines()) == 10
    code = run(fixture_config, "evaluate", "--corpus", corpus, "--queries", queries, "--model", "precomputed",
               "--set", f"backends.embedder={{kind='file', path='{vectors}'}}")
    assert code == EXIT_OK
    report = json.loads((out / "reports" / "precomputed__self_corpus.json").read_text())
    assert set(report["metrics"].values()) == {100.0}


def test_stats_on_reference_table(fixture_config, capsys):
    assert run(fixture_config, "stats", str(PACKAGE_DATA / "table_acc3.csv")) == EXIT_OK
    text = capsys.readouterr().out
    assert re.search(r"KG-E5\s+\|\s+5\.25", text) and re.search(r"Multilingual E5\s+\|\s+8\.25", text)


def test_stats_refuses_single_dataset(fixture_config, tmp_path, capsys):
    path = tmp_path / "one.csv"
    path.write_text("model,only\na,1.0\nb,2.0\n")
    assert run(fixture_config, "stats", str(path)) == EXIT_VALIDATION
    assert "n >= 2" in capsys.readouterr().err


def test_stats_lists_missing_cells(fixture_config, tmp_path, capsys):
    path = tmp_path / "s.jsonl"
    path.write_text('{"model": "a", "dataset": "x", "score": 1}\n{"model": "b", "dataset": "y", "score": 2}\n')
    assert run(fixture_config, "stats", str(path)) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "a/y" in err and "b/x" in err


def test_module_entry_point():
    import subprocess
    import sys

    done = subprocess.run([sys.executable, "-m", "kgembed", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for name in ("ingest", "build-kg", "gen-pairs", "augment", "export-dataset", "index", "evaluate", "stats", "report"):
        assert name in done.stdout


def test_config_hash_ignores_jobs_and_log_level(fixture_config):
    a = load_config(fixture_config)
    assert a.config_hash() == load_config(fixture_config, ["jobs=4", "log_level='DEBUG'"]).config_hash()


def test_translation_outage_exits_with_backend_code(fixture_config, http_service):
    assert run(fixture_config, "build-kg") == EXIT_OK and run(fixture_config, "gen-pairs") == EXIT_OK
    service = http_service(lambda payload: (503, {"error": "busy"}))
    code = run(fixture_config, "augment", "--set", f"backends.translator={{kind='remote', endpoint='{service.url}'}}")
    assert code == EXIT_BACKEND
    failures = (fixture_config.parent / "out" / "translation_failures.jsonl").read_text().splitlines()
    # 16 eligible anchors, two attempts each under the fixture's retry policy
    assert len(failures) == 16 and len(service.requests) == 32
