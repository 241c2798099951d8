"""Corpus ingestion and fixed-size character chunking.

Documents arrive as JSON Lines (one object per line with ``doc_id``,
``language``, ``title``, ``body`` and ``source``). Text is NFC-normalised on
load so that Greek diacritics compare consistently downstream.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence

logger = logging.getLogger(__name__)

DEFAULT_LANGUAGES = ("el", "en")


class CorpusError(Exception):
    """Fatal ingestion error (unreadable path, duplicate ids)."""


@dataclass(frozen=True)
class RecordError:
    """A malformed input record. Reported, never silently dropped."""

    path: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line}: {self.message}"


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    language: str
    body: str
    source: str = ""
    title: Optional[str] = None
    # Only populated for query-bearing corpora (e.g. passage retrieval sets
    # whose existing queries double as anchors).
    queries: tuple = ()

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.language:
            raise ValueError(f"document {self.doc_id!r} has no language tag")
        if not self.body or not self.body.strip():
            raise ValueError(f"document {self.doc_id!r} has an empty body")
        object.__setattr__(self, "body", normalize_text(self.body))
        if self.title is not None:
            object.__setattr__(self, "title", normalize_text(self.title))
        object.__setattr__(
            self, "queries", tuple(normalize_text(q).strip() for q in self.queries if q and q.strip())
        )


@dataclass(frozen=True)
class ChunkRecord:
    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    language: str
    span_start: int
    span_end: int

    @property
    def char_span(self) -> tuple:
        return (self.span_start, self.span_end)

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "ordinal": self.ordinal,
            "text": self.text,
            "language": self.language,
            "span_start": self.span_start,
            "span_end": self.span_end,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChunkRecord":
        return cls(
            chunk_id=obj["chunk_id"],
            doc_id=obj["doc_id"],
            ordinal=int(obj["ordinal"]),
            text=obj["text"],
            language=obj["language"],
            span_start=int(obj["span_start"]),
            span_end=int(obj["span_end"]),
        )


@dataclass(frozen=True)
class ChunkingConfig:
    """Chunk size and snapping slack, both in characters."""

    chunk_size: int = 800
    boundary_slack: int = 80

    def __post_init__(self) -> None:
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        if self.boundary_slack < 0:
            raise ValueError("boundary_slack must be non-negative")
        if self.boundary_slack >= self.chunk_size:
            raise ValueError("boundary_slack must be smaller than chunk_size")


def make_chunk_id(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}#{ordinal:04d}"


def _cut_point(text: str, start: int, cfg: ChunkingConfig) -> int:
    hard = start + cfg.chunk_size
    lowest = max(start + 1, hard - cfg.boundary_slack)
    for cut in range(hard, lowest - 1, -1):
        if text[cut].isspace():
            return cut
    return hard


def chunk_document(doc: DocumentRecord, cfg: ChunkingConfig) -> List[ChunkRecord]:
    """Split ``doc.body`` into non-overlapping chunks of at most ``cfg.chunk_size``.

    A cut snaps backward to the nearest whitespace within ``boundary_slack``
    characters of the hard limit, otherwise it falls exactly at the limit.
    Whitespace runs at a cut, and leading or trailing whitespace of the
    body, belong to no chunk.
    """
    text = doc.body
    chunks: List[ChunkRecord] = []
    n = len(text)
    pos = len(text) - len(text.lstrip())
    while pos < n:
        if n - pos <= cfg.chunk_size:
            end = n
            next_pos = n
        else:
            end = _cut_point(text, pos, cfg)
            next_pos = end
            while next_pos < n and text[next_pos].isspace():
                next_pos += 1
        ordinal = len(chunks)
        chunks.append(
            ChunkRecord(
                chunk_id=make_chunk_id(doc.doc_id, ordinal),
                doc_id=doc.doc_id,
                ordinal=ordinal,
                text=text[pos:end],
                language=doc.language,
                span_start=pos,
                span_end=end,
            )
        )
        pos = next_pos
    return chunks


def _corpus_files(path: Path) -> List[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".jsonl" and p.is_file())
    return [path]


def _parse_record(obj, source: Optional[str], languages: Sequence[str]) -> DocumentRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    for key in ("doc_id", "language", "body"):
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    language = obj["language"]
    if language not in languages:
        raise ValueError(f"language {language!r} not in configured languages {list(languages)}")
    queries = obj.get("queries") or ()
    if not isinstance(queries, (list, tuple)) or not all(isinstance(q, str) for q in queries):
        raise ValueError("queries must be a list of strings")
    return DocumentRecord(
        doc_id=str(obj["doc_id"]),
        language=language,
        body=obj["body"] if isinstance(obj["body"], str) else "",
        source=source if source else str(obj.get("source", "")),
        title=obj.get("title"),
        queries=tuple(queries),
    )


def ingest_corpus(
    path,
    source: Optional[str] = None,
    *,
    languages: Sequence[str] = DEFAULT_LANGUAGES,
    errors: Optional[list] = None,
) -> Iterator[DocumentRecord]:
    """Yield documents from a JSONL file or a directory of ``*.jsonl`` files.

    Malformed lines are appended to ``errors`` as :class:`RecordError` (and
    logged); a duplicate ``doc_id`` or an unreadable path raises
    :class:`CorpusError`.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    seen = set()
    for file in _corpus_files(path):
        try:
            handle = open(file, encoding="utf-8")
        except OSError as exc:
            raise CorpusError(f"cannot read {file}: {exc}") from exc
        with handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    doc = _parse_record(json.loads(line), source, languages)
                except (ValueError, TypeError) as exc:
                    err = RecordError(str(file), lineno, str(exc))
                    logger.warning("malformed record %s", err)
                    if errors is not None:
                        errors.append(err)
                    continue
                if doc.doc_id in seen:
                    raise CorpusError(f"duplicate doc_id {doc.doc_id!r} at {file}:{lineno}")
                seen.add(doc.doc_id)
                yield doc


def chunk_corpus(docs: Iterable[DocumentRecord], cfg: ChunkingConfig) -> Iterator[ChunkRecord]:
    for doc in docs:
        yield from chunk_document(doc, cfg)


def write_chunks(path, chunks: Iterable[ChunkRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as out:
        for chunk in chunks:
            out.write(json.dumps(chunk.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def read_chunks(path) -> List[ChunkRecord]:
    with open(path, encoding="utf-8") as handle:
        return [ChunkRecord.from_json(json.loads(line)) for line in handle if line.strip()]
