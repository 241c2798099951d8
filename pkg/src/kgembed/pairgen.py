"""Anchor sampling, anchor-positive pair generation and cross-lingual augmentation.

Randomness comes from NumPy's PCG64 generator. Each chunk gets its own
stream, seeded from ``(rng_seed, sha256(chunk_id))``, so adding documents to
a corpus never changes the samples drawn for existing chunks.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ._http import BackendError, RetryPolicy, call_with_retry, post_json
from .extract import _ordered_map
from .kg import (
    ATOMIC_FACT,
    CHUNK,
    DOCUMENT,
    HAS_ATOMIC_FACT,
    HAS_CHUNK,
    HAS_ENTITY,
    HAS_QUESTION,
    KnowledgeGraph,
)

logger = logging.getLogger(__name__)

ENTITY_SENTENCE = "EntitySentence"
QUESTION_KIND = "Question"
ANCHOR_KINDS = (ATOMIC_FACT, QUESTION_KIND, ENTITY_SENTENCE)
NATIVE = "native"
TRANSLATED = "translated"
DATASET_FORMAT = "kgembed-pairs"
DATASET_VERSION = 1


@dataclass(frozen=True)
class PairGenConfig:
    m_a: int = 2
    m_q: int = 1
    m_e: int = 1
    entities_per_sentence: int = 5
    rng_seed: int = 42

    def __post_init__(self) -> None:
        if min(self.m_a, self.m_q, self.m_e) < 0:
            raise ValueError("m_a, m_q and m_e must be non-negative")
        if self.m_a + self.m_q + self.m_e < 1:
            raise ValueError("at least one of m_a, m_q, m_e must be positive")
        if self.entities_per_sentence < 2:
            raise ValueError("entities_per_sentence must be at least 2")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")


def chunk_rng(seed: int, chunk_id: str) -> np.random.Generator:
    digest = hashlib.sha256(chunk_id.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, *words])))


def sample_without_replacement(rng: np.random.Generator, items: Sequence, m: int) -> list:
    """Draw ``min(m, len(items))`` items in sampled order."""
    take = min(m, len(items))
    if take == 0:
        return []
    idx = rng.permutation(len(items))[:take]
    return [items[i] for i in idx]


# ---------------------------------------------------------------------------
# entity sentences

_TEMPLATES = {
    "el": "Το απόσπασμα αναφέρεται σε {items} και {last}.",
    "en": "This passage refers to {items} and {last}.",
}


def template_entity_sentence(names: Sequence[str], language: str) -> str:
    template = _TEMPLATES.get(language, _TEMPLATES["en"])
    return template.format(items=", ".join(names[:-1]), last=names[-1])


class SentenceBackend(Protocol):
    name: str

    def generate(self, names: Sequence[str], language: str) -> str:
        ...


def generate_entity_sentence(entities: Sequence[Tuple[str, str]], language: str,
                             backend: Optional[SentenceBackend] = None) -> str:
    """One sentence mentioning every entity name.

    With a backend, its sentence is kept only if it contains every name
    (case-insensitively); otherwise the deterministic template is used.
    """
    if len(entities) < 2:
        raise ValueError("an entity sentence needs at least two entities")
    names = [name for name, _ in entities]
    if backend is not None:
        try:
            sentence = " ".join(backend.generate(names, language).split())
        except (BackendError, ValueError) as exc:
            logger.warning("entity sentence backend failed, using template: %s", exc)
        else:
            folded = sentence.casefold()
            missing = [n for n in names if n.casefold() not in folded]
            if sentence and not missing:
                return sentence
            logger.warning("entity sentence missing %s, using template", missing)
    return template_entity_sentence(names, language)


# ---------------------------------------------------------------------------
# sampling


def eligible_anchor_nodes(g: KnowledgeGraph, chunk_id: str) -> Tuple[list, list, list]:
    """Facts, questions and entities usable for ``chunk_id``.

    A fact or question whose text is identical to the chunk itself would make
    a degenerate pair, so it is not eligible.
    """
    chunk = g.node(chunk_id)
    if chunk.kind != CHUNK:
        raise KeyError(f"{chunk_id!r} is not a chunk")
    text = chunk.text.strip()
    facts = [n for n in g.linked(chunk_id, HAS_ATOMIC_FACT) if n.text.strip() != text]
    questions = [n for n in g.linked(chunk_id, HAS_QUESTION) if n.text.strip() != text]
    entities = g.linked(chunk_id, HAS_ENTITY)
    return facts, questions, entities


def _entity_sentences(entities: list, cfg: PairGenConfig, rng: np.random.Generator, language: str,
                      backend: Optional[SentenceBackend]) -> List[str]:
    if len(entities) < 2 or cfg.m_e == 0:
        return []
    r = min(cfg.entities_per_sentence, len(entities))
    # Number of distinct ordered selections bounds how many different sentences exist.
    distinct = 1
    for i in range(r):
        distinct *= len(entities) - i
    target = min(cfg.m_e, distinct)
    chosen: List[tuple] = []
    seen = set()
    while len(chosen) < target:
        pick = tuple(int(i) for i in rng.permutation(len(entities))[:r])
        if pick not in seen:
            seen.add(pick)
            chosen.append(pick)
    return [
        generate_entity_sentence([(entities[i].text, entities[i].attrs.get("entity_type", "")) for i in pick],
                                 language, backend)
        for pick in chosen
    ]


def sample_anchors(g: KnowledgeGraph, chunk_id: str, cfg: PairGenConfig,
                   rng: Optional[np.random.Generator] = None,
                   backend: Optional[SentenceBackend] = None) -> List[Tuple[str, str]]:
    """Sample ``(anchor_text, anchor_kind)`` for one chunk.

    Draw order is facts, then questions, then entity sentences, all from the
    same generator (by default the chunk's own stream).
    """
    facts, questions, entities = eligible_anchor_nodes(g, chunk_id)
    if rng is None:
        rng = chunk_rng(cfg.rng_seed, chunk_id)
    language = g.node(chunk_id).language
    anchors = [(n.text, ATOMIC_FACT) for n in sample_without_replacement(rng, facts, cfg.m_a)]
    anchors += [(n.text, QUESTION_KIND) for n in sample_without_replacement(rng, questions, cfg.m_q)]
    anchors += [(s, ENTITY_SENTENCE) for s in _entity_sentences(entities, cfg, rng, language, backend)]
    return anchors


# ---------------------------------------------------------------------------
# pairs and datasets


@dataclass(frozen=True)
class TrainingPair:
    anchor_text: str
    anchor_kind: str
    anchor_lang: str
    positive_chunk_id: str
    positive_text: str
    positive_lang: str
    origin: str = NATIVE
    source_doc: str = ""
    rng_seed: int = 0
    stage: str = "II"
    augment_to_greek: bool = False

    def __post_init__(self) -> None:
        if self.anchor_kind not in ANCHOR_KINDS:
            raise ValueError(f"unknown anchor kind {self.anchor_kind!r}")
        if self.origin not in (NATIVE, TRANSLATED):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.anchor_text == self.positive_text:
            raise ValueError("anchor and positive text must differ")
        if self.origin == TRANSLATED and self.anchor_lang == self.positive_lang:
            raise ValueError("a translated pair must be cross-lingual")

    @property
    def key(self) -> tuple:
        return (self.anchor_text, self.positive_chunk_id, self.anchor_lang)

    def to_json(self) -> dict:
        return {
            "anchor": self.anchor_text,
            "anchor_kind": self.anchor_kind,
            "anchor_lang": self.anchor_lang,
            "positive": self.positive_text,
            "positive_chunk_id": self.positive_chunk_id,
            "positive_lang": self.positive_lang,
            "origin": self.origin,
            "source_doc": self.source_doc,
            "stage": self.stage,
            "rng_seed": self.rng_seed,
            "augment_to_greek": self.augment_to_greek,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingPair":
        return cls(
            anchor_text=obj["anchor"],
            anchor_kind=obj["anchor_kind"],
            anchor_lang=obj["anchor_lang"],
            positive_chunk_id=obj["positive_chunk_id"],
            positive_text=obj["positive"],
            positive_lang=obj["positive_lang"],
            origin=obj.get("origin", NATIVE),
            source_doc=obj.get("source_doc", ""),
            rng_seed=int(obj.get("rng_seed", 0)),
            stage=obj.get("stage", "II"),
            augment_to_greek=bool(obj.get("augment_to_greek", False)),
        )


@dataclass
class TrainingDataset:
    pairs: List[TrainingPair] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    kg_fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    def counts(self) -> dict:
        """Pair counts by kind, anchor language and origin."""
        out = {"total": len(self.pairs), "by_kind": {}, "by_anchor_lang": {}, "by_origin": {}}
        for p in self.pairs:
            for bucket, key in (("by_kind", p.anchor_kind), ("by_anchor_lang", p.anchor_lang), ("by_origin", p.origin)):
                out[bucket][key] = out[bucket].get(key, 0) + 1
        for bucket in ("by_kind", "by_anchor_lang", "by_origin"):
            out[bucket] = dict(sorted(out[bucket].items()))
        return out


def _add_unique(pairs: List[TrainingPair], seen: set, pair: TrainingPair) -> None:
    if pair.key in seen:
        logger.info("dropping duplicate pair for chunk %s: %r", pair.positive_chunk_id, pair.anchor_text[:60])
        return
    seen.add(pair.key)
    pairs.append(pair)


def generate_pairs(g: KnowledgeGraph, cfg: PairGenConfig,
                   backend: Optional[SentenceBackend] = None) -> TrainingDataset:
    """Stage II: one native pair per sampled anchor, positive = its chunk.

    Documents are visited by node id and chunks by ordinal, so the result
    depends only on the graph contents and ``cfg``.
    """
    dataset = TrainingDataset(config=asdict(cfg), kg_fingerprint=g.fingerprint())
    docs = g.nodes_of_kind(DOCUMENT)
    if not docs:
        logger.warning("empty graph: no pairs generated")
        return dataset
    seen: set = set()
    for doc in docs:
        to_greek = bool(doc.attrs.get("augment_to_greek", False))
        doc_id = str(doc.attrs.get("doc_id", doc.node_id.split(":", 1)[-1]))
        for chunk in g.chunks_of(doc.node_id):
            if chunk.attrs.get("degraded"):
                continue
            for text, kind in sample_anchors(g, chunk.node_id, cfg, backend=backend):
                pair = TrainingPair(
                    anchor_text=text, anchor_kind=kind, anchor_lang=chunk.language,
                    positive_chunk_id=chunk.node_id, positive_text=chunk.text, positive_lang=chunk.language,
                    origin=NATIVE, source_doc=doc_id, rng_seed=cfg.rng_seed, stage="II",
                    augment_to_greek=to_greek,
                )
                _add_unique(dataset.pairs, seen, pair)
    return dataset


# ---------------------------------------------------------------------------
# translation


class TranslatorBackend(Protocol):
    name: str

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        ...


class MockTranslator:
    """Prefixes ``[EN] `` / ``[EL] `` to the text. Deterministic and invertible."""

    name = "mock-translator"

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        return f"[{target_lang.upper()}] {text}"

    @staticmethod
    def invert(text: str) -> str:
        for tag in ("[EN] ", "[EL] "):
            if text.startswith(tag):
                return text[len(tag):]
        return text


class RemoteTranslator:
    """Machine-translation endpoint: ``POST {text, source, target} -> {translation}``."""

    def __init__(self, endpoint: str, auth_env: Optional[str] = None, timeout: float = 60.0, name: str = "remote-translator"):
        self.endpoint = endpoint
        self.auth_env = auth_env
        self.timeout = timeout
        self.name = name

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        body = post_json(self.endpoint, {"text": text, "source": source_lang, "target": target_lang},
                         self.auth_env, self.timeout)
        translation = body.get("translation") if isinstance(body, dict) else None
        if not isinstance(translation, str) or not translation.strip():
            raise BackendError("response has no 'translation' field")
        return translation.strip()


def augmentation_target(pair: TrainingPair) -> Optional[str]:
    """Target language for a native pair, or None when it is not augmented."""
    if pair.origin != NATIVE:
        return None
    if pair.anchor_lang == "el":
        return "en"
    if pair.augment_to_greek:
        return "el"
    return None


def augment_cross_lingual(d: TrainingDataset, translator: TranslatorBackend, jobs: int = 1,
                          failures: Optional[list] = None,
                          retry: RetryPolicy = RetryPolicy(attempts=1)) -> TrainingDataset:
    """Stage III: append a translated-anchor twin for every eligible native pair.

    Greek anchors get an English twin; anchors from corpora flagged
    ``augment_to_greek`` get a Greek twin. Positives are never translated and
    the original pairs are kept. A failed translation skips that pair only.
    """
    for p in d.pairs:
        if not p.anchor_lang:
            raise ValueError(f"pair for {p.positive_chunk_id} has no anchor language")
    # Greek-anchor loop first, then the to-Greek loop.
    todo = [p for p in d.pairs if augmentation_target(p) == "en"]
    todo += [p for p in d.pairs if augmentation_target(p) == "el"]

    def run(p: TrainingPair):
        target = augmentation_target(p)
        try:
            text, _ = call_with_retry(lambda: translator.translate(p.anchor_text, p.anchor_lang, target), retry,
                                      what=f"translate anchor of {p.positive_chunk_id}")
            return p, target, text
        except (BackendError, ValueError) as exc:
            return p, target, exc

    out = TrainingDataset(list(d.pairs), dict(d.config), d.kg_fingerprint)
    out.config["translator"] = getattr(translator, "name", type(translator).__name__)
    seen = {p.key for p in out.pairs}
    for p, target, result in _ordered_map(run, todo, jobs):
        if isinstance(result, Exception) or not str(result).strip():
            logger.warning("translation failed for chunk %s: %s", p.positive_chunk_id, result)
            if failures is not None:
                failures.append({"positive_chunk_id": p.positive_chunk_id, "anchor": p.anchor_text, "error": str(result)})
            continue
        twin = TrainingPair(
            anchor_text=result, anchor_kind=p.anchor_kind, anchor_lang=target,
            positive_chunk_id=p.positive_chunk_id, positive_text=p.positive_text, positive_lang=p.positive_lang,
            origin=TRANSLATED, source_doc=p.source_doc, rng_seed=p.rng_seed, stage="III",
            augment_to_greek=p.augment_to_greek,
        )
        _add_unique(out.pairs, seen, twin)
    return out


# ---------------------------------------------------------------------------
# file format


def write_dataset(path, d: TrainingDataset) -> None:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "config": d.config,
              "kg_fingerprint": d.kg_fingerprint, "count": len(d.pairs)}
    with open(path, "w", encoding="utf-8") as out:
        out.write(json.dumps({"header": header}, ensure_ascii=False, sort_keys=True) + "\n")
        for p in d.pairs:
            out.write(json.dumps(p.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_dataset(path) -> TrainingDataset:
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    first = json.loads(lines[0])
    header = first.get("header") if isinstance(first, dict) else None
    if not header or header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: missing dataset header")
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    pairs = [TrainingPair.from_json(json.loads(line)) for line in lines[1:]]
    if len(pairs) != header.get("count"):
        raise ValueError(f"{path}: expected {header.get('count')} pairs, found {len(pairs)}")
    return TrainingDataset(pairs, header.get("config", {}), header.get("kg_fingerprint", ""))


def export_training_rows(d: TrainingDataset) -> Iterable[dict]:
    """Minimal ``{anchor, positive}`` rows, the shape sentence-transformers expects."""
    for p in d.pairs:
        yield {"anchor": p.anchor_text, "positive": p.positive_text}
