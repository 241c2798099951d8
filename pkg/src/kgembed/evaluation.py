"""Retrieval metrics (Acc@k, NDCG@k) and the benchmark runner."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from ._http import RetryPolicy
from .embed import QUERY, build_index, embed_records, top_k

DEFAULT_KS = (3, 10)
METRIC_NAMES = ("Acc", "NDCG")


class BenchmarkError(ValueError):
    """Benchmark inputs are inconsistent (e.g. relevant doc missing from corpus)."""


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    relevant_doc_ids: frozenset
    language: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "relevant_doc_ids", frozenset(self.relevant_doc_ids))
        if not self.relevant_doc_ids:
            raise BenchmarkError(f"query {self.query_id!r} has no relevant documents")


@dataclass
class RetrievalRun:
    queries: List[QueryRecord]
    rankings: Dict[str, List[str]]

    def __post_init__(self) -> None:
        for qid, ranked in self.rankings.items():
            if len(set(ranked)) != len(ranked):
                raise BenchmarkError(f"ranking for {qid!r} contains duplicates")
        missing = [q.query_id for q in self.queries if q.query_id not in self.rankings]
        if missing:
            raise BenchmarkError(f"no ranking for queries {missing[:5]}")

    def to_jsonl(self) -> Iterable[str]:
        for q in self.queries:
            yield json.dumps(
                {"query_id": q.query_id, "relevant_doc_ids": sorted(q.relevant_doc_ids), "ranking": self.rankings[q.query_id]},
                ensure_ascii=False,
            )


def _check(run: RetrievalRun, k: int) -> None:
    if not run.queries:
        raise BenchmarkError("empty retrieval run")
    if k < 1:
        raise ValueError("k must be at least 1")


def acc_at_k(run: RetrievalRun, k: int) -> float:
    """Fraction of queries with at least one relevant document in the top ``k``."""
    _check(run, k)
    hits = sum(1 for q in run.queries if q.relevant_doc_ids.intersection(run.rankings[q.query_id][:k]))
    return hits / len(run.queries)


def _dcg(gains: Iterable[int]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(run: RetrievalRun, k: int) -> float:
    """Mean binary-gain NDCG@k; the ideal ranking puts every relevant doc first."""
    _check(run, k)
    total = 0.0
    for q in run.queries:
        ranked = run.rankings[q.query_id][:k]
        dcg = _dcg(1 if d in q.relevant_doc_ids else 0 for d in ranked)
        idcg = _dcg([1] * min(len(q.relevant_doc_ids), k))
        total += dcg / idcg
    return total / len(run.queries)


@dataclass
class MetricReport:
    model: str
    dataset: str
    values: Dict[str, float] = field(default_factory=dict)  # percentages, full precision

    def to_json(self) -> dict:
        return {"model": self.model, "dataset": self.dataset, "metrics": {k: round(v, 10) for k, v in self.values.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(obj["model"], obj["dataset"], {k: float(v) for k, v in obj["metrics"].items()})


def metric_columns(ks: Sequence[int]) -> List[str]:
    return [f"{name}@{k}" for name in METRIC_NAMES for k in sorted(ks)]


def format_reports(reports: Sequence[MetricReport]) -> str:
    """Plain-text table: Dataset, Model, then Acc@k and NDCG@k columns."""
    if not reports:
        return ""
    columns = []
    for r in reports:
        for c in r.values:
            if c not in columns:
                columns.append(c)
    columns.sort(key=lambda c: (METRIC_NAMES.index(c.split("@")[0]) if c.split("@")[0] in METRIC_NAMES else 9,
                                int(c.split("@")[1]) if c.split("@")[-1].isdigit() else 0))
    rows = [["Dataset", "Model", *columns]]
    for r in reports:
        rows.append([r.dataset, r.model, *(f"{r.values[c]:.2f}" if c in r.values else "-" for c in columns)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])] + [c.rjust(w) for c, w in zip(row[2:], widths[2:])]
        lines.append(" | ".join(cells))
        if n == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def validate_benchmark(queries: Sequence[QueryRecord], corpus: Sequence[Tuple[str, str]]) -> None:
    ids = [d for d, _ in corpus]
    if len(set(ids)) != len(ids):
        raise BenchmarkError("benchmark corpus has duplicate doc ids")
    known = set(ids)
    qids = [q.query_id for q in queries]
    if len(set(qids)) != len(qids):
        raise BenchmarkError("benchmark has duplicate query ids")
    for q in queries:
        missing = q.relevant_doc_ids - known
        if missing:
            raise BenchmarkError(f"query {q.query_id!r}: relevant docs not in corpus: {sorted(missing)[:5]}")


def run_benchmark(queries: Sequence[QueryRecord], corpus: Sequence[Tuple[str, str]], backend,
                  ks: Sequence[int] = DEFAULT_KS, model: str = "", dataset: str = "",
                  batch_size: int = 32, retry: RetryPolicy = RetryPolicy(backoff=0.0)) -> Tuple[MetricReport, RetrievalRun]:
    """Index ``corpus``, retrieve ``max(ks)`` docs per query, score every k."""
    if not ks:
        raise ValueError("ks must be non-empty")
    if not queries:
        raise BenchmarkError("no queries")
    validate_benchmark(queries, corpus)
    index = build_index(corpus, backend, batch_size, retry)
    qvecs = embed_records(backend, [q.query_id for q in queries], [q.text for q in queries], QUERY, batch_size, retry)
    depth = max(ks)
    rankings = {q.query_id: [doc for doc, _ in top_k(index, v, depth)] for q, v in zip(queries, qvecs)}
    run = RetrievalRun(list(queries), rankings)
    values = {}
    for k in sorted(ks):
        values[f"Acc@{k}"] = 100.0 * acc_at_k(run, k)
    for k in sorted(ks):
        values[f"NDCG@{k}"] = 100.0 * ndcg_at_k(run, k)
    report = MetricReport(model or getattr(backend, "name", "model"), dataset, values)
    return report, run


def load_queries(path) -> List[QueryRecord]:
    out = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(QueryRecord(str(obj["query_id"]), obj["text"], frozenset(map(str, obj["relevant_doc_ids"])),
                                       obj.get("language", "")))
            except (ValueError, KeyError, TypeError) as exc:
                raise BenchmarkError(f"{path}:{lineno}: bad query record ({exc})") from None
    return out


def load_benchmark_corpus(path) -> List[Tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["doc_id"]), obj["text"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise BenchmarkError(f"{path}:{lineno}: bad corpus record ({exc})") from None
    return out
