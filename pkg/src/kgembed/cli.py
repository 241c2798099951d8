"""Command-line entry point: ``kgembed <subcommand> -c pipeline.toml``.

Exit codes: 0 success, 1 fatal input/config error, 2 backend exhaustion,
3 validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from . import __version__
from ._http import BackendError
from .config import ConfigError, PipelineConfig, load_config, make_embedder, make_extractor, make_translator
from .corpus import CorpusError, chunk_document, ingest_corpus, write_chunks
from .embed import EmbeddingError, PASSAGE, QUERY, embed_records, write_vectors
from .evaluation import (
    BenchmarkError,
    MetricReport,
    format_reports,
    load_benchmark_corpus,
    load_queries,
    run_benchmark,
)
from .extract import build_knowledge_graph
from .kg import GraphFormatError, OntologyError, load, persist
from .pairgen import augment_cross_lingual, export_training_rows, generate_pairs, read_dataset, write_dataset
from .stats import (
    ScoreMatrixError,
    friedman_aligned_ranks,
    li_posthoc,
    load_score_matrix,
    matrix_from_reports,
    stats_json,
    stats_report,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_BACKEND = 2
EXIT_VALIDATION = 3

KG_DIR = "kg"
KG_SUMMARY = "kg_summary.json"
NATIVE_PAIRS = "pairs_native.jsonl"
AUGMENTED_PAIRS = "pairs_augmented.jsonl"
TRAIN_EXPORT = "train_pairs.jsonl"

logger = logging.getLogger("kgembed.cli")


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# helpers


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"time": self.formatTime(record), "level": record.levelname, "logger": record.name,
                           "message": record.getMessage()}, ensure_ascii=False)


def _setup_logging(cfg: PipelineConfig, level: Optional[str]) -> None:
    root = logging.getLogger("kgembed")
    for handler in list(root.handlers):
        if getattr(handler, "_kgembed", False):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(logging.DEBUG)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(cfg.output_dir / "logs.jsonl", encoding="utf-8")
    file_handler.setFormatter(_JsonLineFormatter())
    file_handler.setLevel(getattr(logging, (level or cfg.log_level).upper(), logging.INFO))
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    console.setLevel(logging.WARNING)
    console.addFilter(lambda record: not getattr(record, "printed", False))
    for handler in (file_handler, console):
        handler._kgembed = True
        root.addHandler(handler)


def _say(message: str, level: int = logging.INFO) -> None:
    logger.log(level, message, extra={"printed": True})
    print(message, file=sys.stderr)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as out:
        for row in rows:
            out.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def _write_manifest(artifact: Path, cfg: PipelineConfig, inputs: Sequence[Path], counts: dict) -> None:
    manifest = {
        "artifact": artifact.name,
        "kgembed_version": __version__,
        "config_hash": cfg.config_hash(),
        "inputs": {p.name: _sha256(p) for p in inputs if p.is_file()},
        "counts": counts,
    }
    _dump_json(artifact.with_name(artifact.name + ".manifest.json"), manifest)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run the earlier pipeline step first)")
    return path


def _corpus_inputs(cfg: PipelineConfig) -> List[Path]:
    if not cfg.corpora:
        raise ConfigError("no corpora configured")
    files = []
    for spec in cfg.corpora:
        if not spec.path.exists():
            raise CorpusError(f"corpus path does not exist: {spec.path}")
        files.extend(sorted(spec.path.glob("*.jsonl")) if spec.path.is_dir() else [spec.path])
    return files


def _documents(cfg: PipelineConfig, errors: list):
    for spec in cfg.corpora:
        yield from ingest_corpus(spec.path, spec.source, languages=cfg.languages, errors=errors)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    inputs = _corpus_inputs(cfg)
    errors: list = []
    docs = list(_documents(cfg, errors))
    out = cfg.output_dir / "chunks.jsonl"
    n = write_chunks(out, (c for d in docs for c in chunk_document(d, cfg.chunking)))
    _write_jsonl(cfg.output_dir / "ingest_errors.jsonl", ({"path": e.path, "line": e.line, "error": e.message} for e in errors))
    _write_manifest(out, cfg, inputs, {"documents": len(docs), "chunks": n, "malformed_records": len(errors)})
    _say(f"ingested {len(docs)} documents into {n} chunks ({len(errors)} malformed records) -> {out}")
    return EXIT_OK


def cmd_build_kg(cfg: PipelineConfig, args) -> int:
    inputs = _corpus_inputs(cfg)
    errors: list = []
    degraded: list = []
    backend = make_extractor(cfg.backend("extractor"))
    g = build_knowledge_graph(_documents(cfg, errors), backend, cfg=cfg.chunking, flags=cfg.flags(),
                              retry=cfg.retry, jobs=cfg.jobs, degraded=degraded)
    kg_dir = cfg.output_dir / KG_DIR
    persist(g, kg_dir)
    _write_jsonl(cfg.output_dir / "degraded.jsonl", (d.to_json() for d in degraded))
    _write_jsonl(cfg.output_dir / "ingest_errors.jsonl", ({"path": e.path, "line": e.line, "error": e.message} for e in errors))
    chunks = g.node_counts()["Chunk"]
    summary = {
        "config_hash": cfg.config_hash(),
        "inputs": {p.name: _sha256(p) for p in inputs},
        "extractor": getattr(backend, "name", type(backend).__name__),
        "kg_fingerprint": g.fingerprint(),
        "nodes": g.node_counts(),
        "edges": g.edge_counts(),
        "degraded_chunks": len(degraded),
        "malformed_records": len(errors),
    }
    _dump_json(cfg.output_dir / KG_SUMMARY, summary)
    _say(f"knowledge graph: {sum(summary['nodes'].values())} nodes, {sum(summary['edges'].values())} edges, "
         f"{len(degraded)} degraded chunks -> {kg_dir}")
    if chunks and len(degraded) == chunks:
        logger.error("every chunk degraded: extraction backend exhausted")
        return EXIT_BACKEND
    return EXIT_OK


def cmd_gen_pairs(cfg: PipelineConfig, args) -> int:
    kg_dir = _require(cfg.output_dir / KG_DIR, "knowledge graph")
    g = load(kg_dir)
    dataset = generate_pairs(g, cfg.pairgen)
    out = cfg.output_dir / NATIVE_PAIRS
    write_dataset(out, dataset)
    _write_manifest(out, cfg, [kg_dir / "nodes.jsonl", kg_dir / "edges.jsonl"], dataset.counts())
    _say(f"generated {len(dataset)} native pairs -> {out}")
    return EXIT_OK


def cmd_augment(cfg: PipelineConfig, args) -> int:
    src = _require(cfg.output_dir / NATIVE_PAIRS, "native dataset")
    native = read_dataset(src)
    failures: list = []
    augmented = augment_cross_lingual(native, make_translator(cfg.backend("translator")), jobs=cfg.jobs,
                                     failures=failures, retry=cfg.retry)
    out = cfg.output_dir / AUGMENTED_PAIRS
    write_dataset(out, augmented)
    _write_jsonl(cfg.output_dir / "translation_failures.jsonl", failures)
    _write_manifest(out, cfg, [src], {**augmented.counts(), "translation_failures": len(failures)})
    _say(f"augmented {len(native)} native pairs to {len(augmented)} pairs -> {out}")
    if failures and not augmented.counts()["by_origin"].get("translated"):
        _say(f"every translation failed ({len(failures)} anchors)", logging.ERROR)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_export(cfg: PipelineConfig, args) -> int:
    name = NATIVE_PAIRS if args.native else AUGMENTED_PAIRS
    src = _require(cfg.output_dir / name, "dataset")
    dataset = read_dataset(src)
    out = Path(args.out) if args.out else cfg.output_dir / TRAIN_EXPORT
    n = _write_jsonl(out, export_training_rows(dataset))
    _write_manifest(out, cfg, [src], {"pairs": n})
    _say(f"exported {n} anchor/positive rows -> {out}")
    return EXIT_OK


def cmd_index(cfg: PipelineConfig, args) -> int:
    corpus_path = _require(Path(args.corpus), "benchmark corpus")
    corpus = load_benchmark_corpus(corpus_path)
    backend = make_embedder(cfg.backend("embedder"))
    ids = [d for d, _ in corpus]
    vectors = embed_records(backend, ids, [t for _, t in corpus], PASSAGE, retry=cfg.retry)
    inputs = [corpus_path]
    if args.queries:
        query_path = _require(Path(args.queries), "benchmark queries")
        queries = load_queries(query_path)
        qids = [q.query_id for q in queries]
        clash = set(qids) & set(ids)
        if clash:
            raise BenchmarkError(f"query ids collide with doc ids: {sorted(clash)[:5]}")
        ids += qids
        vectors = __import__("numpy").vstack([vectors, embed_records(backend, qids, [q.text for q in queries], QUERY, retry=cfg.retry)])
        inputs.append(query_path)
    out = Path(args.out) if args.out else cfg.output_dir / "vectors" / f"{corpus_path.stem}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_vectors(out, ids, vectors)
    _write_manifest(out, cfg, inputs, {"vectors": len(ids), "dim": int(vectors.shape[1])})
    _say(f"wrote {len(ids)} vectors -> {out}")
    return EXIT_OK


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    query_path = _require(Path(args.queries), "benchmark queries")
    corpus_path = _require(Path(args.corpus), "benchmark corpus")
    queries = load_queries(query_path)
    corpus = load_benchmark_corpus(corpus_path)
    backend = make_embedder(cfg.backend("embedder"))
    dataset = args.dataset or corpus_path.stem
    report, run = run_benchmark(queries, corpus, backend, cfg.ks, model=args.model or "", dataset=dataset, retry=cfg.retry)
    stem = f"{_safe(report.model)}__{_safe(dataset)}"
    reports = cfg.output_dir / "reports"
    out = reports / f"{stem}.json"
    _dump_json(out, report.to_json())
    (reports / f"{stem}.txt").write_text(format_reports([report]), encoding="utf-8")
    runs = cfg.output_dir / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    (runs / f"{stem}.jsonl").write_text("".join(line + "\n" for line in run.to_jsonl()), encoding="utf-8")
    _write_manifest(out, cfg, [query_path, corpus_path], {"queries": len(queries), "documents": len(corpus)})
    print(format_reports([report]), end="")
    return EXIT_OK


def _collect_stats_inputs(paths: Sequence[Path], metrics: Sequence[str]):
    reports = []
    matrices = {}
    for path in paths:
        _require(path, "score file")
        if path.suffix == ".json":
            try:
                reports.append(MetricReport.from_json(json.loads(path.read_text(encoding="utf-8"))))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise ScoreMatrixError(f"{path}: not a metric report ({exc!r})") from None
        else:
            matrices[path.stem] = load_score_matrix(path)
    if reports:
        wanted = list(metrics) or [m for m in ("Acc@3", "NDCG@3") if any(m in r.values for r in reports)]
        for metric in wanted:
            matrices[metric] = matrix_from_reports(reports, metric)
    return matrices


def cmd_stats(cfg: PipelineConfig, args) -> int:
    paths = [Path(p) for p in args.inputs]
    expanded: List[Path] = []
    for p in paths:
        if p.is_dir():
            expanded.extend(q for q in sorted(p.glob("*.json")) if not q.name.endswith(".manifest.json"))
        else:
            expanded.append(p)
    matrices = _collect_stats_inputs(expanded, args.metric or [])
    if not matrices:
        raise ScoreMatrixError("no score inputs given")
    results = {}
    for metric, matrix in matrices.items():
        far = friedman_aligned_ranks(matrix)
        results[metric] = (far, li_posthoc(far, cfg.stats))
    out_dir = cfg.output_dir / "stats"
    _dump_json(out_dir / "stats.json", stats_json(results))
    text = stats_report(results)
    (out_dir / "stats.txt").write_text(text, encoding="utf-8")
    _write_manifest(out_dir / "stats.json", cfg, expanded,
                    {metric: {"models": m.k, "datasets": m.n} for metric, m in matrices.items()})
    print(text, end="")
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, args) -> int:
    out = cfg.output_dir
    lines = ["kgembed pipeline report", ""]
    summary = out / KG_SUMMARY
    if summary.exists():
        s = json.loads(summary.read_text(encoding="utf-8"))
        lines.append("knowledge graph")
        lines += [f"  {k:<12} {v}" for k, v in s["nodes"].items()]
        lines += [f"  {k:<16} {v}" for k, v in s["edges"].items()]
        lines.append(f"  degraded chunks: {s['degraded_chunks']}")
        lines.append("")
    for name in (NATIVE_PAIRS, AUGMENTED_PAIRS):
        manifest = out / (name + ".manifest.json")
        if manifest.exists():
            counts = json.loads(manifest.read_text(encoding="utf-8"))["counts"]
            lines.append(f"{name}: {counts['total']} pairs; by kind {counts['by_kind']}; by origin {counts['by_origin']}")
    reports = sorted((out / "reports").glob("*.json")) if (out / "reports").exists() else []
    reports = [p for p in reports if not p.name.endswith(".manifest.json")]
    if reports:
        lines += ["", format_reports([MetricReport.from_json(json.loads(p.read_text(encoding="utf-8"))) for p in reports]).rstrip()]
    stats_txt = out / "stats" / "stats.txt"
    if stats_txt.exists():
        lines += ["", stats_txt.read_text(encoding="utf-8").rstrip()]
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sources = [summary, out / NATIVE_PAIRS, out / AUGMENTED_PAIRS, stats_txt, *reports]
    _write_manifest(out / "report.txt", cfg, [p for p in sources if p.exists()], {"reports": len(reports)})
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "ingest": (cmd_ingest, "read and chunk the configured corpora"),
    "build-kg": (cmd_build_kg, "Stage I: build the knowledge graph"),
    "gen-pairs": (cmd_gen_pairs, "Stage II: sample anchor-positive pairs"),
    "augment": (cmd_augment, "Stage III: cross-lingual anchor augmentation"),
    "export-dataset": (cmd_export, "write {anchor, positive} training rows"),
    "index": (cmd_index, "embed a benchmark corpus into a vector file"),
    "evaluate": (cmd_evaluate, "run a retrieval benchmark (Acc@k, NDCG@k)"),
    "stats": (cmd_stats, "Friedman aligned-ranks + Li post-hoc over score files"),
    "report": (cmd_report, "summarise the artifacts in the output directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgembed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kgembed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("-c", "--config", help="pipeline TOML file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, TOML value); repeatable")
        p.add_argument("-o", "--output-dir", help="overrides output_dir")
        p.add_argument("--seed", type=int, help="overrides pairgen.rng_seed")
        p.add_argument("--jobs", type=int, help="overrides jobs (bounded in-flight backend calls)")
        p.add_argument("--log-level", help="overrides log_level")
        if name == "export-dataset":
            p.add_argument("--native", action="store_true", help="export Stage II pairs instead of augmented ones")
            p.add_argument("--out")
        if name == "index":
            p.add_argument("--corpus", required=True)
            p.add_argument("--queries", help="also embed these queries into the same vector file")
            p.add_argument("--out")
        if name == "evaluate":
            p.add_argument("--queries", required=True)
            p.add_argument("--corpus", required=True)
            p.add_argument("--model", help="model label in the report")
            p.add_argument("--dataset", help="dataset label in the report")
        if name == "stats":
            p.add_argument("inputs", nargs="+", help="score matrices (.csv/.jsonl) or report .json files/directories")
            p.add_argument("--metric", action="append", help="metric to aggregate from report files; repeatable")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(str(Path(args.output_dir).resolve()))}")
    if args.seed is not None:
        overrides.append(f"pairgen.rng_seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    try:
        cfg = load_config(args.config, overrides)
        _setup_logging(cfg, args.log_level)
        return args.func(cfg, args)
    except (ConfigError, CorpusError, MissingArtifact) as exc:
        _say(f"error: {exc}", logging.ERROR)
        return EXIT_INPUT
    except BackendError as exc:
        _say(f"backend error: {exc}", logging.ERROR)
        return EXIT_BACKEND
    except (ScoreMatrixError, BenchmarkError, OntologyError, GraphFormatError, EmbeddingError) as exc:
        _say(f"validation error: {exc}", logging.ERROR)
        return EXIT_VALIDATION
    except OSError as exc:
        _say(f"error: {exc}", logging.ERROR)
        return EXIT_INPUT
    except ValueError as exc:
        _say(f"validation error: {exc}", logging.ERROR)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
