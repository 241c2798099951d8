"""Score an embedder on a small retrieval benchmark with Acc@k and NDCG@k."""

from __future__ import annotations

from importlib import resources

from kgembed import MockEmbedder, build_index, run_benchmark, top_k
from kgembed.evaluation import format_reports, load_benchmark_corpus, load_queries

data = resources.files("kgembed") / "data"
queries = load_queries(data / "sample_bench_queries.jsonl")
corpus = load_benchmark_corpus(data / "sample_bench_corpus.jsonl")
print(f"{len(queries)} queries over {len(corpus)} documents")

# %% the same hashed bag-of-words model at two widths
reports = []
for dim in (64, 16):
    report, run = run_benchmark(queries, corpus, MockEmbedder(dim), ks=(3, 10), model=f"mock{dim}", dataset="sample")
    reports.append(report)
print(format_reports(reports))

# %% look inside one query
q = queries[0]
index = build_index(corpus, MockEmbedder(64))
hits = top_k(index, MockEmbedder(64).embed_batch([q.text])[0], 3)
print(f"\n{q.text!r}  relevant={sorted(q.relevant_doc_ids)}")
for doc_id, score in hits:
    print(f"  {doc_id}  {score:.3f}")
