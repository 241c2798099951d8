"""Friedman aligned ranks and Li's post-hoc procedure on a six-model, four-dataset score table."""

from __future__ import annotations

from importlib import resources

import numpy as np

from kgembed.stats import StatsConfig, friedman_aligned_ranks, li_posthoc, load_score_matrix, stats_report

data = resources.files("kgembed") / "data"

# %% scores per model and dataset
m = load_score_matrix(data / "table_acc3.csv")
print("datasets:", m.datasets)
for model, row in zip(m.models, m.scores):
    print(f"  {model:18s}", np.round(row, 2))

# %% align by subtracting each dataset's mean, then rank all k*n cells jointly
far = friedman_aligned_ranks(m)
print("\naligned observations:\n", np.round(far.aligned, 2))
print("mean aligned ranks:", dict(zip(far.models, far.mean_rank)))
print(f"T = {far.statistic:.4f}, p = {far.p_value:.5f}")

# %% compare every model against the best-ranked one
results = {}
for name in ("table_acc3.csv", "table_ndcg3.csv"):
    far = friedman_aligned_ranks(load_score_matrix(data / name))
    results[name.removeprefix("table_").removesuffix(".csv")] = (far, li_posthoc(far, StatsConfig(alpha=0.05)))
print()
print(stats_report(results))
