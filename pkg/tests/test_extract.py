from __future__ import annotations

import json

import pytest

from kgembed._http import RetryPolicy
from kgembed.corpus import ChunkingConfig, ChunkRecord, DocumentRecord, ingest_corpus
from kgembed.extract import (
    CorpusFlags,
    ExtractionResult,
    MockExtractor,
    RemoteExtractor,
    build_knowledge_graph,
    extract_chunk,
    extract_json_object,
    parse_extraction,
)
from kgembed.kg import ATOMIC_FACT, CHUNK, DOCUMENT, ENTITY, QUESTION

from conftest import PACKAGE_DATA, TESTS_DATA

NO_WAIT = RetryPolicy(attempts=3, backoff=0.0)


def chunk(text: str, language: str = "el") -> ChunkRecord:
    return ChunkRecord("d#0000", "d", 0, text, language, 0, len(text))


def test_mock_extractor_on_greek_copular_sentence():
    r = MockExtractor().extract("Η Αθήνα είναι η πρωτεύουσα της Ελλάδας.", "el")
    assert [name for name, _ in r.entities] == ["αθήνα", "ελλάδας"]
    assert r.relations == (("αθήνα", "co_occurs_with", "ελλάδας"),)
    assert r.atomic_facts == ("Η Αθήνα είναι η πρωτεύουσα της Ελλάδας.",)
    assert len(r.questions) == 2


def test_mock_extractor_is_deterministic():
    text = "The Danube flows through Vienna. Barges from Belgrade carry grain."
    assert MockExtractor().extract(text, "en") == MockExtractor().extract(text, "en")


def test_build_dedupes_and_drops_dangling_relations():
    r = ExtractionResult.build(
        entities=[("Αθήνα", "place"), ("ΑΘΉΝΑ", "place"), ("Σπάρτη", "")],
        relations=[("Αθήνα", "rival of", "Σπάρτη"), ("Αθήνα", "near", "Θήβα")],
        atomic_facts=["Γεγονός.", "Γεγονός.", " "],
    )
    assert r.entities == (("Αθήνα", "PLACE"), ("Σπάρτη", "ENTITY"))
    assert r.relations == (("Αθήνα", "rival of", "Σπάρτη"),)
    assert r.atomic_facts == ("Γεγονός.",)


def test_json_object_is_found_inside_prose():
    payload = 'Sure! Here it is:\n{"entities": [{"name": "a {b}", "type": "X"}], "relations": []} trailing'
    assert json.loads(extract_json_object(payload))["entities"][0]["name"] == "a {b}"


@pytest.mark.parametrize("payload", ["no json here", '{"entities": "wrong"}', "[1, 2]"])
def test_parse_extraction_rejects_invalid(payload):
    with pytest.raises(ValueError):
        parse_extraction(payload)


class Flaky:
    name = "flaky"
    deterministic = True
    max_input_chars = None

    def __init__(self, failures: int):
        self.failures = failures
        self.calls = 0

    def extract(self, text, language):
        self.calls += 1
        if self.calls <= self.failures:
            return "garbage"
        return MockExtractor().extract(text, language)


def test_retry_recovers_from_invalid_output():
    backend = Flaky(failures=2)
    log: list = []
    result = extract_chunk(backend, chunk("Η Ρόδος είναι νησί."), NO_WAIT, log)
    assert not result.degraded and result.entities
    assert backend.calls == 3 and log == []


def test_exhausted_retries_degrade_the_chunk():
    log: list = []
    delays: list = []
    result = extract_chunk(Flaky(failures=99), chunk("Η Ρόδος είναι νησί."), RetryPolicy(3, 1.0), log, delays.append)
    assert result.degraded
    assert [r.chunk_id for r in log] == ["d#0000"] and log[0].attempts == 3
    assert delays == [1.0, 2.0]


def test_overlong_chunk_rejected():
    backend = MockExtractor()
    backend.max_input_chars = 10
    with pytest.raises(ValueError, match="input limit"):
        extract_chunk(backend, chunk("x" * 11))


def test_build_graph_on_fixture_corpus():
    docs = list(ingest_corpus(TESTS_DATA / "fixture_corpus.jsonl", "fixture"))
    g = build_knowledge_graph(docs, MockExtractor(), cfg=ChunkingConfig(400, 60))
    counts = g.node_counts()
    assert counts[DOCUMENT] == 4 and counts[CHUNK] == 4
    assert counts[ATOMIC_FACT] == 8
    assert counts[ENTITY] == 21


def test_degraded_chunk_stays_in_graph():
    docs = [DocumentRecord("d", "el", "Η Ρόδος είναι νησί.")]
    log: list = []
    g = build_knowledge_graph(docs, Flaky(failures=99), retry=NO_WAIT, degraded=log)
    (c,) = g.nodes_of_kind(CHUNK)
    assert c.attrs["degraded"] is True
    assert g.node_counts()[ENTITY] == 0 and len(log) == 1


def test_query_bearing_corpus_adds_its_queries():
    docs = list(ingest_corpus(PACKAGE_DATA / "sample_corpus_en.jsonl", "passages"))
    plain = build_knowledge_graph(docs, MockExtractor(), cfg=ChunkingConfig(400, 60))
    g = build_knowledge_graph(docs, MockExtractor(), cfg=ChunkingConfig(400, 60),
                              flags={"passages": CorpusFlags(query_bearing=True)})
    questions = g.nodes_of_kind(QUESTION)
    generated = sorted(q.text for q in questions if q.attrs["origin"] == "generated")
    supplied = sorted(q.text for q in questions if q.attrs["origin"] == "query")
    assert generated == sorted(q.text for q in plain.nodes_of_kind(QUESTION))
    assert supplied and supplied == sorted(q for d in docs for q in d.queries)


def test_parallel_build_matches_serial():
    docs = list(ingest_corpus(PACKAGE_DATA / "sample_corpus_el.jsonl", "wiki"))
    serial = build_knowledge_graph(docs, MockExtractor(), cfg=ChunkingConfig(200, 40))
    parallel = build_knowledge_graph(docs, MockExtractor(), cfg=ChunkingConfig(200, 40), jobs=4)
    assert serial.fingerprint() == parallel.fingerprint()


def test_remote_extractor_wire_contract(http_service, monkeypatch):
    reply = {"entities": [["Αθήνα", "PLACE"], ["Ελλάδα", "PLACE"]],
             "relations": [["Αθήνα", "capital of", "Ελλάδα"]],
             "atomic_facts": ["Η Αθήνα είναι πρωτεύουσα."], "questions": ["Ποια είναι η πρωτεύουσα;"]}
    service = http_service(lambda payload: (200, {"text": "```json\n" + json.dumps(reply, ensure_ascii=False) + "\n```"}))
    monkeypatch.setenv("KG_TEST_TOKEN", "secret")
    backend = RemoteExtractor(service.url, "m1", auth_env="KG_TEST_TOKEN")
    result = extract_chunk(backend, chunk("Η Αθήνα είναι η πρωτεύουσα της Ελλάδας."), NO_WAIT)
    assert result.relations == (("Αθήνα", "capital of", "Ελλάδα"),)
    sent = service.requests[0]
    assert sent["payload"]["model"] == "m1" and sent["payload"]["temperature"] == 0
    assert "Η Αθήνα είναι η πρωτεύουσα της Ελλάδας." in sent["payload"]["prompt"]
    assert sent["headers"]["Authorization"] == "Bearer secret"


def test_remote_extractor_http_errors_degrade(http_service):
    service = http_service(lambda payload: (503, {"error": "busy"}))
    log: list = []
    result = extract_chunk(RemoteExtractor(service.url, "m"), chunk("Κείμενο."), NO_WAIT, log)
    assert result.degraded and len(service.requests) == 3
    assert "503" in log[0].last_error
