"""Friedman Aligned-Ranks test and the Li post-hoc procedure.

Rows of a :class:`ScoreMatrix` are models, columns are datasets, and higher
scores are better. Aligned observations subtract each dataset's mean score;
all ``k*n`` aligned values are then ranked jointly (rank 1 = largest,
ties averaged).

References
----------
J.L. Hodges, E.L. Lehmann, Rank methods for combination of independent
experiments in analysis of variance, Ann. Math. Statist. 33 (1962) 482-497.
J. Li, A two-step rejection procedure for testing multiple hypotheses,
J. Statist. Plann. Inference 138 (2008) 1521-1527.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as st

logger = logging.getLogger(__name__)


class ScoreMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreMatrix:
    models: Tuple[str, ...]
    datasets: Tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=float)
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if scores.shape != (len(self.models), len(self.datasets)):
            raise ScoreMatrixError(f"scores shape {scores.shape} != ({len(self.models)}, {len(self.datasets)})")
        if len(self.models) < 2:
            raise ScoreMatrixError("at least 2 models are required")
        if len(self.datasets) < 2:
            raise ScoreMatrixError("at least 2 datasets are required (n >= 2)")
        if len(set(self.models)) != len(self.models) or len(set(self.datasets)) != len(self.datasets):
            raise ScoreMatrixError("model and dataset ids must be unique")
        if not np.all(np.isfinite(scores)):
            raise ScoreMatrixError("score matrix has missing or non-finite cells")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def k(self) -> int:
        return len(self.models)

    @property
    def n(self) -> int:
        return len(self.datasets)


@dataclass(frozen=True)
class StatsConfig:
    alpha: float = 0.05
    two_sided: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class FarResult:
    models: Tuple[str, ...]
    datasets: Tuple[str, ...]
    aligned: np.ndarray
    ranks: np.ndarray
    mean_rank: np.ndarray
    model_rank_totals: np.ndarray
    dataset_rank_totals: np.ndarray
    statistic: float
    p_value: float

    @property
    def k(self) -> int:
        return len(self.models)

    @property
    def n(self) -> int:
        return len(self.datasets)

    def mean_ranks(self) -> Dict[str, float]:
        return dict(zip(self.models, map(float, self.mean_rank)))


@dataclass(frozen=True)
class LiComparison:
    model: str
    z: float
    p_value: float
    apv: float
    rejected: bool


@dataclass(frozen=True)
class LiResult:
    control: str
    alpha: float
    comparisons: Tuple[LiComparison, ...]

    def decision(self, model: str) -> str:
        for c in self.comparisons:
            if c.model == model:
                return "Rejected" if c.rejected else "Failed to reject"
        raise KeyError(model)

    def by_model(self) -> Dict[str, LiComparison]:
        return {c.model: c for c in self.comparisons}


def aligned_observations(m: ScoreMatrix) -> np.ndarray:
    """Score minus the mean score of all models on the same dataset."""
    return m.scores - m.scores.mean(axis=0, keepdims=True)


# Aligned values are rounded before ranking so that float noise from the
# mean subtraction cannot split exact ties (keeps column shifts rank-neutral).
_RANK_DECIMALS = 9


def _aligned_ranks(m: ScoreMatrix) -> np.ndarray:
    aligned = np.round(aligned_observations(m), _RANK_DECIMALS)
    return st.rankdata(-aligned.ravel(), method="average").reshape(aligned.shape)


def far_mean_ranks(m: ScoreMatrix) -> np.ndarray:
    """Mean aligned rank per model (row order of ``m``); lower is better."""
    return _aligned_ranks(m).mean(axis=1)


def _far_from_ranks(ranks: np.ndarray) -> Tuple[float, float]:
    k, n = ranks.shape
    kn = k * n
    model_totals = ranks.sum(axis=1)
    dataset_totals = ranks.sum(axis=0)
    numerator = (k - 1) * (np.sum(model_totals**2) - (k * n**2 / 4.0) * (kn + 1) ** 2)
    denominator = kn * (kn + 1) * (2 * kn + 1) / 6.0 - np.sum(dataset_totals**2) / k
    if denominator <= 0 or not np.isfinite(denominator):
        warnings.warn("degenerate Friedman aligned-ranks denominator; reporting p = 1", RuntimeWarning)
        return 0.0, 1.0
    statistic = float(numerator / denominator)
    return statistic, float(st.chi2.sf(statistic, k - 1))


def far_statistic(m: ScoreMatrix) -> Tuple[float, float]:
    """Aligned-ranks statistic ``T`` and its chi-square (k-1 dof) upper-tail p-value."""
    return _far_from_ranks(_aligned_ranks(m))


def friedman_aligned_ranks(m: ScoreMatrix) -> FarResult:
    aligned = aligned_observations(m)
    ranks = _aligned_ranks(m)
    statistic, p_value = _far_from_ranks(ranks)
    return FarResult(
        models=m.models,
        datasets=m.datasets,
        aligned=aligned,
        ranks=ranks,
        mean_rank=ranks.mean(axis=1),
        model_rank_totals=ranks.sum(axis=1),
        dataset_rank_totals=ranks.sum(axis=0),
        statistic=statistic,
        p_value=p_value,
    )


def li_posthoc_from_mean_ranks(models: Sequence[str], mean_ranks: Sequence[float], n: int,
                               cfg: StatsConfig = StatsConfig()) -> LiResult:
    """Li's procedure against the best-ranked model.

    ``z = n * (R_j - R_control) / sqrt(k (k n + 1) / 6)`` on mean aligned ranks,
    ``APV = p / (p + 1 - p_max)`` with ``p_max`` the largest unadjusted p.
    """
    k = len(models)
    if k < 2:
        raise ValueError("Li post-hoc needs at least 2 models")
    if len(mean_ranks) != k:
        raise ValueError("one mean rank per model is required")
    ranks = np.asarray(mean_ranks, dtype=float)
    c = int(np.argmin(ranks))
    se = np.sqrt(k * (k * n + 1) / 6.0)
    rows = []
    for j in range(k):
        if j == c:
            continue
        z = float(n * (ranks[j] - ranks[c]) / se)
        p = float(2 * st.norm.sf(abs(z))) if cfg.two_sided else float(st.norm.sf(z))
        rows.append((models[j], z, min(p, 1.0)))
    p_max = max(p for _, _, p in rows)
    comparisons = []
    for model, z, p in rows:
        denom = p + 1.0 - p_max
        # p_max == 1 makes every APV p / p = 1; keep that limit when p underflows to 0
        apv = p / denom if denom > 0 else 1.0
        comparisons.append(LiComparison(model, z, p, apv, apv <= cfg.alpha))
    comparisons.sort(key=lambda cmp: (cmp.p_value, cmp.model))
    return LiResult(models[c], cfg.alpha, tuple(comparisons))


def li_posthoc(far: FarResult, cfg: StatsConfig = StatsConfig()) -> LiResult:
    return li_posthoc_from_mean_ranks(far.models, far.mean_rank, far.n, cfg)


# ---------------------------------------------------------------------------
# reporting


def stats_table(far: FarResult, li: LiResult) -> List[Tuple[str, float, Optional[float], str]]:
    """Rows ``(model, mean rank, APV or None, decision)`` sorted by mean rank."""
    cmp = li.by_model()
    order = sorted(range(far.k), key=lambda i: (far.mean_rank[i], far.models[i]))
    rows = []
    for i in order:
        model = far.models[i]
        if model == li.control:
            rows.append((model, float(far.mean_rank[i]), None, "---"))
        else:
            c = cmp[model]
            rows.append((model, float(far.mean_rank[i]), c.apv, "Rejected" if c.rejected else "Failed to reject"))
    return rows


def stats_report(results: Mapping[str, Tuple[FarResult, LiResult]]) -> str:
    """One plain-text table (Model, FAR, APV, H0) per metric."""
    if not results:
        raise ValueError("no results to report")
    blocks = []
    for metric, (far, li) in results.items():
        if not far.models:
            raise ValueError(f"{metric}: empty model list")
        rows = [("Model", "FAR", "APV", "H0")]
        for model, mean_rank, apv, decision in stats_table(far, li):
            rows.append((model, f"{mean_rank:.2f}", "---" if apv is None else f"{apv:.3f}", decision))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"{metric}  (FAR T = {far.statistic:.4f}, p = {far.p_value:.4g}; Li alpha = {li.alpha})"]
        for n, r in enumerate(rows):
            lines.append(" | ".join([r[0].ljust(widths[0]), r[1].rjust(widths[1]), r[2].rjust(widths[2]), r[3].ljust(widths[3])]).rstrip())
            if n == 0:
                lines.append("-+-".join("-" * w for w in widths))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def stats_json(results: Mapping[str, Tuple[FarResult, LiResult]]) -> dict:
    out = {}
    for metric, (far, li) in results.items():
        out[metric] = {
            "models": list(far.models),
            "datasets": list(far.datasets),
            "far": {"mean_ranks": far.mean_ranks(), "statistic": far.statistic, "p_value": far.p_value},
            "li": {
                "control": li.control,
                "alpha": li.alpha,
                "comparisons": [
                    {"model": c.model, "z": c.z, "p_value": c.p_value, "apv": c.apv,
                     "h0": "Rejected" if c.rejected else "Failed to reject"}
                    for c in li.comparisons
                ],
            },
        }
    return out


# ---------------------------------------------------------------------------
# loading


def _from_cells(cells: Dict[Tuple[str, str], float], models: List[str], datasets: List[str]) -> ScoreMatrix:
    missing = [(m, d) for m in models for d in datasets if (m, d) not in cells]
    if missing:
        listed = ", ".join(f"{m}/{d}" for m, d in missing[:20])
        raise ScoreMatrixError(f"missing cells: {listed}")
    scores = np.array([[cells[(m, d)] for d in datasets] for m in models], dtype=float)
    return ScoreMatrix(tuple(models), tuple(datasets), scores)


def load_score_matrix(path) -> ScoreMatrix:
    """Read a CSV (``model,<dataset>,...``) or JSONL (``{model, dataset, score}``) score file."""
    path = Path(path)
    cells: Dict[Tuple[str, str], float] = {}
    models: List[str] = []
    datasets: List[str] = []

    def add(model: str, dataset: str, value) -> None:
        if model not in models:
            models.append(model)
        if dataset not in datasets:
            datasets.append(dataset)
        if value is None or str(value).strip() == "":
            return
        if (model, dataset) in cells:
            raise ScoreMatrixError(f"duplicate cell {model}/{dataset}")
        cells[(model, dataset)] = float(value)

    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if not header or len(header) < 2:
                raise ScoreMatrixError(f"{path}: expected header 'model,<dataset>,...'")
            for row in reader:
                if not row:
                    continue
                for dataset, value in zip(header[1:], row[1:] + [""] * (len(header) - len(row))):
                    add(row[0], dataset, value)
    else:
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    add(str(obj["model"]), str(obj["dataset"]), obj["score"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ScoreMatrixError(f"{path}:{lineno}: bad score record ({exc})") from None
    return _from_cells(cells, models, datasets)


def matrix_from_reports(reports, metric: str) -> ScoreMatrix:
    """Collect one metric from a set of MetricReports into a models x datasets matrix."""
    cells: Dict[Tuple[str, str], float] = {}
    models: List[str] = []
    datasets: List[str] = []
    for r in reports:
        if r.model not in models:
            models.append(r.model)
        if r.dataset not in datasets:
            datasets.append(r.dataset)
        if metric in r.values:
            cells[(r.model, r.dataset)] = r.values[metric]
    return _from_cells(cells, models, datasets)


def write_score_matrix_csv(path, m: ScoreMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as out:
        writer = csv.writer(out)
        writer.writerow(["model", *m.datasets])
        for model, row in zip(m.models, m.scores):
            writer.writerow([model, *(repr(float(v)) for v in row)])
