from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgembed._http import BackendError, RetryPolicy
from kgembed.corpus import ChunkingConfig, ingest_corpus
from kgembed.extract import CorpusFlags, MockExtractor, build_knowledge_graph
from kgembed.kg import (
    ATOMIC_FACT,
    CHUNK,
    ENTITY,
    HAS_ATOMIC_FACT,
    HAS_ENTITY,
    KgEdge,
    KgNode,
    KnowledgeGraph,
    content_node_id,
)
from kgembed.pairgen import (
    ENTITY_SENTENCE,
    TRANSLATED,
    MockTranslator,
    PairGenConfig,
    RemoteTranslator,
    TrainingPair,
    augment_cross_lingual,
    chunk_rng,
    generate_entity_sentence,
    generate_pairs,
    read_dataset,
    sample_anchors,
    write_dataset,
)

from conftest import TESTS_DATA

CFG = PairGenConfig(m_a=2, m_q=1, m_e=1, entities_per_sentence=5, rng_seed=7)


def fixture_graph(augment_to_greek: bool = True) -> KnowledgeGraph:
    docs = ingest_corpus(TESTS_DATA / "fixture_corpus.jsonl", "fixture")
    return build_knowledge_graph(docs, MockExtractor(), cfg=ChunkingConfig(400, 60),
                                 flags={"fixture": CorpusFlags(augment_to_greek=augment_to_greek)})


def test_fixture_yields_sixteen_native_pairs():
    d = generate_pairs(fixture_graph(), CFG)
    counts = d.counts()
    assert counts["total"] == 16
    assert counts["by_kind"] == {"AtomicFact": 8, "EntitySentence": 4, "Question": 4}
    assert counts["by_origin"] == {"native": 16}
    assert all(p.positive_text != p.anchor_text for p in d.pairs)


def test_same_seed_same_pairs_other_seed_differs():
    g = fixture_graph()
    a = generate_pairs(g, CFG)
    b = generate_pairs(g, CFG)
    assert a.pairs == b.pairs
    others = [generate_pairs(g, PairGenConfig(rng_seed=s)).pairs for s in range(1, 6)]
    assert any(o != a.pairs for o in others)


def test_chunk_streams_are_independent():
    # The draw for one chunk does not depend on which other chunks exist.
    assert chunk_rng(5, "a#0000").random() == chunk_rng(5, "a#0000").random()
    assert chunk_rng(5, "a#0000").random() != chunk_rng(5, "b#0000").random()


def entity_graph(n_entities: int) -> KnowledgeGraph:
    g = KnowledgeGraph()
    g.add_node(KgNode("c", CHUNK, "some chunk text", "en"))
    for i in range(n_entities):
        g.add_node(KgNode(f"e{i}", ENTITY, f"name{i}", "en", {"entity_type": "ENTITY"}))
        g.add_edge(KgEdge("c", f"e{i}", HAS_ENTITY))
    return g


@pytest.mark.parametrize("n,m_e,r,expected", [(0, 3, 5, 0), (1, 3, 5, 0), (2, 1, 5, 1), (2, 5, 5, 2), (3, 10, 2, 6), (6, 4, 5, 4)])
def test_entity_sentence_count(n, m_e, r, expected):
    cfg = PairGenConfig(m_a=0, m_q=0, m_e=m_e, entities_per_sentence=r)
    anchors = sample_anchors(entity_graph(n), "c", cfg)
    assert len(anchors) == expected
    assert len(set(anchors)) == expected
    assert all(kind == ENTITY_SENTENCE for _, kind in anchors)


def test_entity_sentence_mentions_every_entity():
    text = generate_entity_sentence([("αθήνα", "PLACE"), ("σπάρτη", "PLACE"), ("θήβα", "PLACE")], "el")
    assert text == "Το απόσπασμα αναφέρεται σε αθήνα, σπάρτη και θήβα."


class Parrot:
    name = "parrot"

    def __init__(self, reply):
        self.reply = reply

    def generate(self, names, language):
        return self.reply


def test_entity_sentence_backend_is_validated():
    ents = [("vienna", "PLACE"), ("budapest", "PLACE")]
    assert generate_entity_sentence(ents, "en", Parrot("Vienna is upstream of Budapest.")) == "Vienna is upstream of Budapest."
    # a reply that drops an entity falls back to the template
    assert generate_entity_sentence(ents, "en", Parrot("Vienna is nice.")) == "This passage refers to vienna and budapest."


def test_anchor_equal_to_chunk_is_ineligible():
    docs = ingest_corpus(TESTS_DATA / "fixture_corpus.jsonl", "fixture")
    g = build_knowledge_graph([next(iter(docs))], MockExtractor())
    (c,) = g.nodes_of_kind(CHUNK)
    node_id = content_node_id(ATOMIC_FACT, c.text, c.node_id)
    g.add_node(KgNode(node_id, ATOMIC_FACT, c.text, c.language))
    g.add_edge(KgEdge(c.node_id, node_id, HAS_ATOMIC_FACT))
    anchors = sample_anchors(g, c.node_id, PairGenConfig(m_a=10, m_q=0, m_e=0))
    assert c.text not in [a for a, _ in anchors]


def test_pair_invariants():
    with pytest.raises(ValueError):
        TrainingPair("x", "AtomicFact", "el", "c", "x", "el")
    with pytest.raises(ValueError):
        TrainingPair("x", "AtomicFact", "el", "c", "y", "el", origin=TRANSLATED)
    with pytest.raises(ValueError):
        TrainingPair("x", "Summary", "el", "c", "y", "el")


@pytest.mark.parametrize("kwargs", [dict(m_a=-1), dict(m_a=0, m_q=0, m_e=0), dict(entities_per_sentence=1), dict(rng_seed=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PairGenConfig(**kwargs)


def test_mock_augmentation_full_scan():
    native = generate_pairs(fixture_graph(), CFG)
    augmented = augment_cross_lingual(native, MockTranslator())
    assert augmented.pairs[: len(native)] == native.pairs
    twins = augmented.pairs[len(native):]
    assert len(twins) == len(native)
    by_key = {(p.anchor_text, p.positive_chunk_id): p for p in native.pairs}
    for t in twins:
        assert t.origin == TRANSLATED and t.anchor_lang != t.positive_lang
        src = by_key[(MockTranslator.invert(t.anchor_text), t.positive_chunk_id)]
        assert t.anchor_text == f"[{t.anchor_lang.upper()}] {src.anchor_text}"
        assert t.positive_text == src.positive_text


def test_unflagged_english_is_not_augmented():
    native = generate_pairs(fixture_graph(augment_to_greek=False), CFG)
    augmented = augment_cross_lingual(native, MockTranslator())
    greek = sum(1 for p in native.pairs if p.anchor_lang == "el")
    assert len(augmented) - len(native) == greek == 8


class Unreliable:
    name = "unreliable"

    def __init__(self, bad_every: int):
        self.bad_every = bad_every
        self.calls = 0

    def translate(self, text, source_lang, target_lang):
        self.calls += 1
        if self.calls % self.bad_every == 0:
            raise BackendError("timeout")
        return f"<{target_lang}> {text}"


def test_translation_failures_are_skipped_and_logged():
    native = generate_pairs(fixture_graph(), CFG)
    failures: list = []
    augmented = augment_cross_lingual(native, Unreliable(bad_every=4), failures=failures)
    assert len(failures) == 4
    assert len(augmented) == len(native) + 12


def test_translation_retry_recovers():
    native = generate_pairs(fixture_graph(), CFG)
    failures: list = []
    augmented = augment_cross_lingual(native, Unreliable(bad_every=4), failures=failures,
                                      retry=RetryPolicy(attempts=2, backoff=0.0))
    assert failures == [] and len(augmented) == 2 * len(native)


def test_parallel_augmentation_keeps_order():
    native = generate_pairs(fixture_graph(), CFG)
    serial = augment_cross_lingual(native, MockTranslator())
    parallel = augment_cross_lingual(native, MockTranslator(), jobs=4)
    assert serial.pairs == parallel.pairs


def test_dataset_roundtrip(tmp_path):
    d = augment_cross_lingual(generate_pairs(fixture_graph(), CFG), MockTranslator())
    write_dataset(tmp_path / "d.jsonl", d)
    back = read_dataset(tmp_path / "d.jsonl")
    assert back.pairs == d.pairs and back.kg_fingerprint == d.kg_fingerprint
    lines = (tmp_path / "d.jsonl").read_text(encoding="utf-8").splitlines()
    (tmp_path / "short.jsonl").write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match="expected"):
        read_dataset(tmp_path / "short.jsonl")


def test_remote_translator_wire_contract(http_service):
    service = http_service(lambda p: (200, {"translation": "Athens is the capital."}))
    out = RemoteTranslator(service.url).translate("Η Αθήνα είναι πρωτεύουσα.", "el", "en")
    assert out == "Athens is the capital."
    assert service.requests[0]["payload"] == {"text": "Η Αθήνα είναι πρωτεύουσα.", "source": "el", "target": "en"}


def test_remote_translator_rejects_empty_reply(http_service):
    service = http_service(lambda p: (200, {"translation": "  "}))
    with pytest.raises(BackendError):
        RemoteTranslator(service.url).translate("x", "el", "en")


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 9), m_e=st.integers(0, 6), r=st.integers(2, 6), seed=st.integers(0, 2**32))
def test_entity_sentences_are_distinct_and_bounded(n, m_e, r, seed):
    # m_a=1 only keeps the config valid when m_e is 0; the graph has no facts
    cfg = PairGenConfig(m_a=1, m_q=0, m_e=m_e, entities_per_sentence=r, rng_seed=seed)
    anchors = [a for a, k in sample_anchors(entity_graph(n), "c", cfg) if k == ENTITY_SENTENCE]
    assert len(anchors) == len(set(anchors))
    if n < 2:
        assert anchors == []
    else:
        size = min(r, n)
        perms = int(np.prod(range(n - size + 1, n + 1)))
        assert len(anchors) == min(m_e, perms)
