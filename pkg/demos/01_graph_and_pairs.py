"""Build a knowledge graph from the bundled bilingual sample and turn it into training pairs.

Runs offline with the mock extractor and translator.
"""

from __future__ import annotations

from importlib import resources

from kgembed import MockExtractor, MockTranslator, PairGenConfig, augment_cross_lingual, build_knowledge_graph, generate_pairs
from kgembed.corpus import ingest_corpus
from kgembed.extract import CorpusFlags

data = resources.files("kgembed") / "data"

# %% ingest both halves of the sample corpus
docs = [*ingest_corpus(data / "sample_corpus_el.jsonl", source="wiki"),
        *ingest_corpus(data / "sample_corpus_en.jsonl", source="passages")]
print(f"{len(docs)} documents:", sorted({d.language for d in docs}))

# %% stage I: chunk, extract, integrate
# English passages bring their own queries and are also translated into Greek
flags = {"passages": CorpusFlags(query_bearing=True, augment_to_greek=True)}
graph = build_knowledge_graph(docs, MockExtractor(), flags=flags)
print("nodes:", graph.node_counts())
print("edges:", graph.edge_counts())

chunk = graph.nodes_of_kind("Chunk")[0]
print("\nfirst chunk:", chunk.text[:80], "...")
for kind in ("has_atomic_fact", "has_question", "has_entity"):
    print(f"  {kind}:", [n.text for n in graph.linked(chunk.node_id, kind)][:3])

# %% stage II: sample anchors per chunk
native = generate_pairs(graph, PairGenConfig(m_a=2, m_q=1, m_e=1))
print("\nnative pairs:", native.counts())
pair = native.pairs[0]
print(f"  [{pair.anchor_kind}] {pair.anchor_text!r} -> chunk {pair.positive_chunk_id}")

# %% stage III: translate anchors, keep positives as they are
augmented = augment_cross_lingual(native, MockTranslator())
print("\naugmented pairs:", augmented.counts())
for p in augmented.pairs:
    if p.origin != "native":
        print(f"  {p.anchor_text!r} ({p.anchor_lang}) -> positive in {p.positive_lang}")
        break
