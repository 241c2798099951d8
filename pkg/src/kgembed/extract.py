"""Per-chunk extraction of entities, relations, atomic facts and questions.

Extraction is pluggable: :class:`MockExtractor` applies deterministic
surface rules (no network) and :class:`RemoteExtractor` talks to an LLM
completion endpoint. :func:`build_knowledge_graph` maps the results into a
:class:`~kgembed.kg.KnowledgeGraph`.
"""

from __future__ import annotations

import json
import logging
import re
import string
import time
import unicodedata
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import jsonschema

from ._http import BackendError, RetriesExhausted, RetryPolicy, call_with_retry, post_json
from .corpus import ChunkingConfig, ChunkRecord, DocumentRecord, chunk_document
from .kg import (
    ATOMIC_FACT,
    CHUNK,
    DEFAULT_SCHEMA,
    DOCUMENT,
    ENTITY,
    HAS_ATOMIC_FACT,
    HAS_CHUNK,
    HAS_ENTITY,
    HAS_QUESTION,
    QUESTION,
    RELATION,
    KgEdge,
    KgNode,
    KnowledgeGraph,
    OntologySchema,
    content_node_id,
    document_node_id,
    entity_key,
    entity_node_id,
)

logger = logging.getLogger(__name__)

PROMPT_VERSION = "v1"

EXTRACTION_SCHEMA = {
    "type": "object",
    "required": ["entities", "relations", "atomic_facts", "questions"],
    "properties": {
        "entities": {
            "type": "array",
            "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "string", "minLength": 1}},
        },
        "relations": {
            "type": "array",
            "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "string", "minLength": 1}},
        },
        "atomic_facts": {"type": "array", "items": {"type": "string"}},
        "questions": {"type": "array", "items": {"type": "string"}},
    },
}


def _clean(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split())


def _dedupe(items: Iterable, key=lambda x: x) -> list:
    seen = set()
    out = []
    for item in items:
        k = key(item)
        if k not in seen:
            seen.add(k)
            out.append(item)
    return out


@dataclass(frozen=True)
class ExtractionResult:
    entities: Tuple[Tuple[str, str], ...] = ()
    relations: Tuple[Tuple[str, str, str], ...] = ()
    atomic_facts: Tuple[str, ...] = ()
    questions: Tuple[str, ...] = ()
    degraded: bool = False

    @classmethod
    def build(cls, entities=(), relations=(), atomic_facts=(), questions=()) -> "ExtractionResult":
        """Normalise, deduplicate and drop relations with unknown endpoints."""
        ents = []
        for name, etype in entities:
            name = _clean(name)
            if name:
                ents.append((name, (etype.strip() or "ENTITY").upper()))
        ents = _dedupe(ents, key=lambda e: entity_key(e[0]))
        known = {entity_key(name) for name, _ in ents}
        rels = []
        for head, label, tail in relations:
            head, label, tail = _clean(head), _clean(label), _clean(tail)
            if not (head and label and tail):
                continue
            if entity_key(head) not in known or entity_key(tail) not in known:
                logger.debug("dropping relation with unknown endpoint: %s %s %s", head, label, tail)
                continue
            rels.append((head, label, tail))
        rels = _dedupe(rels, key=lambda r: (entity_key(r[0]), r[1].lower(), entity_key(r[2])))
        facts = _dedupe(f for f in map(_clean, atomic_facts) if f)
        qs = _dedupe(q for q in map(_clean, questions) if q)
        return cls(tuple(ents), tuple(rels), tuple(facts), tuple(qs))


def extract_json_object(text: str) -> str:
    """Return the first balanced ``{...}`` block in ``text``, ignoring prose around it."""
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in response")
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    raise ValueError("unbalanced JSON object in response")


def parse_extraction(payload: Union[str, dict]) -> ExtractionResult:
    """Validate a backend payload against the extraction schema.

    Raises ``ValueError`` on anything that does not conform.
    """
    if isinstance(payload, str):
        try:
            payload = json.loads(extract_json_object(payload))
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid JSON: {exc.msg}") from None
    try:
        jsonschema.validate(payload, EXTRACTION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValueError(f"schema violation: {exc.message}") from None
    return ExtractionResult.build(
        entities=[tuple(e) for e in payload["entities"]],
        relations=[tuple(r) for r in payload["relations"]],
        atomic_facts=payload["atomic_facts"],
        questions=payload["questions"],
    )


class ExtractorBackend(Protocol):
    name: str
    deterministic: bool
    max_input_chars: Optional[int]

    def extract(self, text: str, language: str) -> Union[ExtractionResult, str, dict]:
        ...


# Function words that are capitalised at sentence start but are not entities.
STOPWORDS = {
    "el": {
        "ο", "η", "το", "οι", "τα", "του", "της", "των", "τον", "την", "τη", "τους", "τις", "ένας", "μία", "μια",
        "ένα", "και", "σε", "στο", "στη", "στην", "στον", "στα", "στους", "στις", "από", "με", "για", "ως", "κατά",
        "μετά", "πριν", "είναι", "ήταν", "αυτό", "αυτή", "αυτός", "αυτά", "εκεί", "εδώ", "όταν", "όπου", "ενώ",
        "επίσης", "σήμερα", "τι", "ποιος", "ποια", "ποιο", "πώς", "πού", "δεν", "θα", "να", "ότι", "πολλές", "πολλοί",
        "κάθε", "μερικές", "μερικοί",
    },
    "en": {
        "the", "a", "an", "and", "or", "in", "on", "at", "of", "to", "for", "by", "with", "from", "as", "is", "are",
        "was", "were", "it", "its", "this", "that", "these", "those", "there", "here", "when", "where", "while",
        "today", "what", "who", "how", "many", "some", "each", "every", "after", "before", "during", "since", "not",
        "he", "she", "they", "we", "also",
    },
}
COPULAS = {"el": {"είναι", "ήταν"}, "en": {"is", "are", "was", "were"}}
QUESTION_TEMPLATES = {"el": "Τι αναφέρεται για {entity};", "en": "What is stated about {entity}?"}
_SENTENCE_SPLIT = {"el": re.compile(r"(?<=[.!?;])\s+"), "en": re.compile(r"(?<=[.!?])\s+")}
_PUNCT = string.punctuation + "«»“”‘’·…—–"


def split_sentences(text: str, language: str) -> List[str]:
    splitter = _SENTENCE_SPLIT.get(language, _SENTENCE_SPLIT["en"])
    return [s.strip() for s in splitter.split(text.strip()) if s.strip()]


class MockExtractor:
    """Deterministic rule-based extractor for hermetic runs.

    * entities: maximal spans of capitalised tokens (function words trimmed)
      plus the final token of copular sentences, lower-cased;
    * relations: ``(first entity, co_occurs_with, other)`` for every other entity;
    * atomic facts: the chunk's sentences;
    * questions: one template question per entity.
    """

    name = "mock-extractor"
    deterministic = True
    max_input_chars = None

    def extract(self, text: str, language: str) -> ExtractionResult:
        stop = STOPWORDS.get(language, STOPWORDS["en"])
        copulas = COPULAS.get(language, COPULAS["en"])
        sentences = split_sentences(_clean(text), language)
        names: List[str] = []
        for sentence in sentences:
            names.extend(self._capitalised_spans(sentence, stop))
            words = [w.strip(_PUNCT).lower() for w in sentence.split()]
            words = [w for w in words if w]
            if len(words) >= 2 and any(w in copulas for w in words[:-1]):
                last = words[-1]
                if last not in stop and not last.isdigit():
                    names.append(last)
        names = _dedupe(names, key=entity_key)
        entities = [(n, "ENTITY") for n in names]
        relations = [(names[0], "co_occurs_with", other) for other in names[1:]]
        template = QUESTION_TEMPLATES.get(language, QUESTION_TEMPLATES["en"])
        questions = [template.format(entity=n) for n in names]
        return ExtractionResult.build(entities, relations, sentences, questions)

    @staticmethod
    def _capitalised_spans(sentence: str, stop: set) -> List[str]:
        spans: List[List[str]] = []
        current: List[str] = []
        for raw in sentence.split():
            word = raw.strip(_PUNCT)
            leading_break = raw[0] in _PUNCT and word
            if leading_break and current:
                spans.append(current)
                current = []
            if word and word[0].isalpha() and word[0].isupper():
                current.append(word)
                if raw[-1] in _PUNCT:
                    spans.append(current)
                    current = []
            elif current:
                spans.append(current)
                current = []
        if current:
            spans.append(current)
        names = []
        for span in spans:
            while span and span[0].lower() in stop:
                span = span[1:]
            while span and span[-1].lower() in stop:
                span = span[:-1]
            if span:
                name = " ".join(span).lower()
                if len(name) >= 2:
                    names.append(name)
        return names


def load_prompt(name: str) -> str:
    return resources.files("kgembed").joinpath("prompts", name).read_text(encoding="utf-8")


class RemoteExtractor:
    """LLM completion endpoint.

    Wire contract: ``POST {model, prompt, temperature, max_tokens}`` returning
    JSON with a ``text`` field that holds the extraction object.
    """

    deterministic = False

    def __init__(self, endpoint: str, model: str, auth_env: Optional[str] = None,
                 max_tokens: int = 1024, timeout: float = 120.0, max_input_chars: Optional[int] = 8000):
        self.endpoint = endpoint
        self.model = model
        self.auth_env = auth_env
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.max_input_chars = max_input_chars
        self.name = f"remote-extractor:{model}"
        self._templates = {}

    def prompt(self, text: str, language: str) -> str:
        lang = language if language in ("el", "en") else "en"
        if lang not in self._templates:
            self._templates[lang] = load_prompt(f"extract_{lang}_{PROMPT_VERSION}.txt")
        return self._templates[lang].replace("{text}", text)

    def extract(self, text: str, language: str) -> ExtractionResult:
        body = post_json(
            self.endpoint,
            {"model": self.model, "prompt": self.prompt(text, language), "temperature": 0, "max_tokens": self.max_tokens},
            self.auth_env,
            self.timeout,
        )
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise BackendError("response has no 'text' field")
        return parse_extraction(body["text"])


@dataclass(frozen=True)
class DegradationRecord:
    chunk_id: str
    attempts: int
    last_error: str

    def to_json(self) -> dict:
        return {"chunk_id": self.chunk_id, "attempts": self.attempts, "last_error": self.last_error}


def extract_chunk(backend: ExtractorBackend, chunk: ChunkRecord, retry: RetryPolicy = RetryPolicy(),
                  log: Optional[list] = None, sleep: Callable[[float], None] = time.sleep) -> ExtractionResult:
    """Extract one chunk, retrying invalid responses.

    After the retry budget is spent the chunk is degraded: an empty result
    with ``degraded=True`` is returned and a :class:`DegradationRecord` is
    appended to ``log``.
    """
    if not chunk.text.strip():
        raise ValueError(f"chunk {chunk.chunk_id} has empty text")
    limit = getattr(backend, "max_input_chars", None)
    if limit is not None and len(chunk.text) > limit:
        raise ValueError(f"chunk {chunk.chunk_id} exceeds backend input limit ({len(chunk.text)} > {limit})")

    def attempt() -> ExtractionResult:
        out = backend.extract(chunk.text, chunk.language)
        if isinstance(out, ExtractionResult):
            return out
        if isinstance(out, (str, dict)):
            return parse_extraction(out)
        raise ValueError(f"backend returned {type(out).__name__}")

    try:
        result, _ = call_with_retry(attempt, retry, what=f"extract {chunk.chunk_id}", sleep=sleep)
    except RetriesExhausted as exc:
        record = DegradationRecord(chunk.chunk_id, exc.attempts, str(exc.last_error))
        logger.error("degraded chunk %s after %d attempts: %s", chunk.chunk_id, exc.attempts, exc.last_error)
        if log is not None:
            log.append(record)
        return ExtractionResult(degraded=True)
    return result


@dataclass(frozen=True)
class CorpusFlags:
    """Per-corpus switches.

    ``query_bearing``: documents carry their own queries, which are added
    to the generated questions. ``augment_to_greek``: native anchors of this corpus
    are also translated into Greek during cross-lingual augmentation.
    """

    query_bearing: bool = False
    augment_to_greek: bool = False


def _ordered_map(fn, items: Iterable, jobs: int) -> Iterator:
    """Like ``map`` but with up to ``jobs`` calls in flight; output keeps input order."""
    if jobs <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        window: deque = deque()
        for item in items:
            window.append(pool.submit(fn, item))
            if len(window) >= 2 * jobs:
                yield window.popleft().result()
        while window:
            yield window.popleft().result()


def _integrate(g: KnowledgeGraph, doc: DocumentRecord, chunk: ChunkRecord, result: ExtractionResult,
               queries: Sequence[str]) -> None:
    doc_node = document_node_id(doc.doc_id)
    g.add_node(KgNode(
        chunk.chunk_id, CHUNK, chunk.text, chunk.language,
        {"doc_id": doc.doc_id, "ordinal": chunk.ordinal, "span_start": chunk.span_start,
         "span_end": chunk.span_end, "degraded": result.degraded},
    ))
    g.add_edge(KgEdge(doc_node, chunk.chunk_id, HAS_CHUNK))
    if result.degraded:
        return
    by_key = {}
    for name, etype in result.entities:
        node_id = entity_node_id(name, etype, doc.source)
        if node_id not in g:
            g.add_node(KgNode(node_id, ENTITY, name.lower(), chunk.language, {"entity_type": etype, "scope": doc.source}))
        by_key.setdefault(entity_key(name), node_id)
        g.add_edge(KgEdge(chunk.chunk_id, node_id, HAS_ENTITY))
    for head, label, tail in result.relations:
        g.add_edge(KgEdge(by_key[entity_key(head)], by_key[entity_key(tail)], RELATION, label))
    for fact in result.atomic_facts:
        node_id = content_node_id(ATOMIC_FACT, fact, chunk.chunk_id)
        g.add_node(KgNode(node_id, ATOMIC_FACT, fact, chunk.language, {"chunk_id": chunk.chunk_id}))
        g.add_edge(KgEdge(chunk.chunk_id, node_id, HAS_ATOMIC_FACT))
    generated = list(result.questions)
    supplied = [q for q in queries if q not in set(generated)]
    for question, origin in [*((q, "generated") for q in generated), *((q, "query") for q in supplied)]:
        node_id = content_node_id(QUESTION, question, chunk.chunk_id)
        g.add_node(KgNode(node_id, QUESTION, question, chunk.language, {"chunk_id": chunk.chunk_id, "origin": origin}))
        g.add_edge(KgEdge(chunk.chunk_id, node_id, HAS_QUESTION))


def build_knowledge_graph(
    corpus: Iterable[DocumentRecord],
    backend: ExtractorBackend,
    schema: OntologySchema = DEFAULT_SCHEMA,
    cfg: ChunkingConfig = ChunkingConfig(),
    *,
    flags: Optional[Mapping[str, CorpusFlags]] = None,
    retry: RetryPolicy = RetryPolicy(),
    jobs: int = 1,
    degraded: Optional[list] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> KnowledgeGraph:
    """Chunk every document, extract every chunk and integrate the results.

    Extraction may run on ``jobs`` threads; graph writes happen on the
    calling thread in (document, ordinal) order, so the output does not
    depend on scheduling. Per-chunk failures degrade that chunk only.
    """
    limit = getattr(backend, "max_input_chars", None)
    if limit is not None and cfg.chunk_size > limit:
        raise ValueError(f"chunk_size {cfg.chunk_size} exceeds backend input limit {limit}")
    flags = dict(flags or {})
    g = KnowledgeGraph(schema)

    def work():
        for doc in corpus:
            for chunk in chunk_document(doc, cfg):
                yield doc, chunk

    def run(item):
        doc, chunk = item
        return doc, chunk, extract_chunk(backend, chunk, retry, degraded, sleep)

    for doc, chunk, result in _ordered_map(run, work(), jobs):
        flag = flags.get(doc.source, CorpusFlags())
        if chunk.ordinal == 0:
            attrs = {"doc_id": doc.doc_id, "source": doc.source, "title": doc.title or "", "query_bearing": flag.query_bearing,
                     "augment_to_greek": flag.augment_to_greek}
            g.add_node(KgNode(document_node_id(doc.doc_id), DOCUMENT, doc.title or doc.doc_id, doc.language, attrs))
        # Existing queries join the generated questions of the passage's first chunk.
        queries = list(doc.queries) if flag.query_bearing and chunk.ordinal == 0 else []
        _integrate(g, doc, chunk, result, queries)
    return g
