"""Ontology-validated knowledge graph with JSONL persistence.

The ontology has five node kinds and five edge kinds::

    has_chunk        Document -> Chunk
    has_entity       Chunk    -> Entity
    has_atomic_fact  Chunk    -> AtomicFact
    has_question     Chunk    -> Question
    relation(label)  Entity   -> Entity
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

DOCUMENT = "Document"
CHUNK = "Chunk"
ENTITY = "Entity"
QUESTION = "Question"
ATOMIC_FACT = "AtomicFact"
NODE_KINDS = (DOCUMENT, CHUNK, ENTITY, QUESTION, ATOMIC_FACT)

HAS_CHUNK = "has_chunk"
HAS_ENTITY = "has_entity"
HAS_ATOMIC_FACT = "has_atomic_fact"
HAS_QUESTION = "has_question"
RELATION = "relation"

FORMAT_VERSION = 1
NODES_FILE = "nodes.jsonl"
EDGES_FILE = "edges.jsonl"


class OntologyError(ValueError):
    """A node or edge violates the ontology."""


class GraphFormatError(ValueError):
    """A persisted graph cannot be loaded."""


@dataclass(frozen=True)
class OntologySchema:
    node_kinds: frozenset = frozenset(NODE_KINDS)
    edge_rules: Mapping[str, Tuple[str, str]] = field(
        default_factory=lambda: {
            HAS_CHUNK: (DOCUMENT, CHUNK),
            HAS_ENTITY: (CHUNK, ENTITY),
            HAS_ATOMIC_FACT: (CHUNK, ATOMIC_FACT),
            HAS_QUESTION: (CHUNK, QUESTION),
            RELATION: (ENTITY, ENTITY),
        }
    )

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"nodes": sorted(self.node_kinds), "edges": {k: list(v) for k, v in sorted(self.edge_rules.items())}},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def check_edge(self, kind: str, src_kind: str, dst_kind: str, label: Optional[str]) -> None:
        if kind not in self.edge_rules:
            raise OntologyError(f"unknown edge kind {kind!r}")
        allowed_src, allowed_dst = self.edge_rules[kind]
        if (src_kind, dst_kind) != (allowed_src, allowed_dst):
            raise OntologyError(
                f"rule {kind}: {allowed_src}->{allowed_dst} violated by {src_kind}->{dst_kind}"
            )
        if kind == RELATION and not label:
            raise OntologyError("rule relation: a label is required")
        if kind != RELATION and label is not None:
            raise OntologyError(f"rule {kind}: labels are only allowed on relation edges")


DEFAULT_SCHEMA = OntologySchema()


@dataclass
class KgNode:
    node_id: str
    kind: str
    text: str
    language: str = ""
    attrs: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"id": self.node_id, "kind": self.kind, "text": self.text, "language": self.language, "attrs": self.attrs}

    @classmethod
    def from_json(cls, obj: dict) -> "KgNode":
        return cls(obj["id"], obj["kind"], obj["text"], obj.get("language", ""), dict(obj.get("attrs") or {}))


@dataclass(frozen=True, order=True)
class KgEdge:
    src: str
    dst: str
    kind: str
    label: Optional[str] = None

    def to_json(self) -> dict:
        obj = {"src": self.src, "dst": self.dst, "kind": self.kind}
        if self.label is not None:
            obj["label"] = self.label
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "KgEdge":
        return cls(obj["src"], obj["dst"], obj["kind"], obj.get("label"))


def normalize_label(label: str) -> str:
    label = unicodedata.normalize("NFC", label).strip().lower()
    return re.sub(r"[\s\-]+", "_", label)


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:20]


def entity_key(name: str) -> str:
    return unicodedata.normalize("NFC", " ".join(name.split())).casefold()


def document_node_id(doc_id: str) -> str:
    return f"doc:{doc_id}"


def entity_node_id(name: str, entity_type: str, scope: str) -> str:
    return "ent:" + _digest(ENTITY, entity_key(name), entity_type.upper(), scope)


def content_node_id(kind: str, text: str, scope: str) -> str:
    prefix = {ATOMIC_FACT: "fact", QUESTION: "q"}[kind]
    return f"{prefix}:" + _digest(kind, unicodedata.normalize("NFC", text.strip()), scope)


class KnowledgeGraph:
    """Typed property graph.

    Single writer while building; treat as read-only afterwards.
    """

    def __init__(self, schema: OntologySchema = DEFAULT_SCHEMA):
        self.schema = schema
        self.nodes: Dict[str, KgNode] = {}
        self._edges: Dict[KgEdge, None] = {}
        self._out: Dict[Tuple[str, str], List[str]] = defaultdict(list)
        self._in: Dict[Tuple[str, str], List[str]] = defaultdict(list)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> List[KgEdge]:
        return list(self._edges)

    def node(self, node_id: str) -> KgNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def add_node(self, node: KgNode) -> str:
        if node.kind not in self.schema.node_kinds:
            raise OntologyError(f"node kind {node.kind!r} is not one of {sorted(self.schema.node_kinds)}")
        if not node.node_id:
            raise OntologyError("node_id must be non-empty")
        if not node.text or not node.text.strip():
            raise OntologyError(f"node {node.node_id!r} has empty text")
        existing = self.nodes.get(node.node_id)
        if existing is not None:
            if existing != node:
                raise OntologyError(
                    f"id collision on {node.node_id!r}: existing {existing.to_json()} vs new {node.to_json()}"
                )
            return node.node_id
        self.nodes[node.node_id] = node
        return node.node_id

    def add_edge(self, edge: KgEdge) -> bool:
        """Store ``edge``; return False when it duplicates a stored edge."""
        for endpoint in (edge.src, edge.dst):
            if endpoint not in self.nodes:
                raise OntologyError(f"edge {edge.kind}: missing endpoint {endpoint!r}")
        if edge.kind == RELATION and edge.label is not None:
            edge = KgEdge(edge.src, edge.dst, edge.kind, normalize_label(edge.label))
        self.schema.check_edge(edge.kind, self.nodes[edge.src].kind, self.nodes[edge.dst].kind, edge.label)
        if edge in self._edges:
            return False
        if edge.kind == HAS_CHUNK and self._in.get((edge.dst, HAS_CHUNK)):
            raise OntologyError(f"chunk {edge.dst!r} already has a has_chunk parent")
        self._edges[edge] = None
        self._out[(edge.src, edge.kind)].append(edge.dst)
        self._in[(edge.dst, edge.kind)].append(edge.src)
        return True

    def linked(self, node_id: str, kind: str) -> List[KgNode]:
        """Targets of edges ``(node_id, kind, *)`` ordered by node id."""
        if node_id not in self.nodes:
            raise KeyError(f"unknown node {node_id!r}")
        targets = sorted(set(self._out.get((node_id, kind), ())))
        return [self.nodes[t] for t in targets]

    def incoming(self, node_id: str, kind: str) -> List[KgNode]:
        if node_id not in self.nodes:
            raise KeyError(f"unknown node {node_id!r}")
        sources = sorted(set(self._in.get((node_id, kind), ())))
        return [self.nodes[s] for s in sources]

    def nodes_of_kind(self, kind: str) -> List[KgNode]:
        return [self.nodes[i] for i in sorted(self.nodes) if self.nodes[i].kind == kind]

    def chunks_of(self, doc_node_id: str) -> List[KgNode]:
        chunks = self.linked(doc_node_id, HAS_CHUNK)
        return sorted(chunks, key=lambda c: (int(c.attrs.get("ordinal", 0)), c.node_id))

    def node_counts(self) -> Dict[str, int]:
        counts = Counter(n.kind for n in self.nodes.values())
        return {kind: counts.get(kind, 0) for kind in NODE_KINDS}

    def edge_counts(self) -> Dict[str, int]:
        counts = Counter(e.kind for e in self._edges)
        return {kind: counts.get(kind, 0) for kind in sorted(self.schema.edge_rules)}

    def sorted_nodes(self) -> List[KgNode]:
        return [self.nodes[i] for i in sorted(self.nodes)]

    def sorted_edges(self) -> List[KgEdge]:
        return sorted(self._edges, key=lambda e: (e.src, e.kind, e.label or "", e.dst))

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.schema.fingerprint().encode())
        for node in self.sorted_nodes():
            h.update(_dumps(node.to_json()).encode("utf-8"))
        for edge in self.sorted_edges():
            h.update(_dumps(edge.to_json()).encode("utf-8"))
        return h.hexdigest()[:16]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.nodes == other.nodes and set(self._edges) == set(other._edges)

    __hash__ = None  # mutable


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _header(kind: str, count: int, schema: OntologySchema) -> dict:
    return {"format": "kgembed-graph", "file": kind, "version": FORMAT_VERSION, "ontology": schema.fingerprint(), "count": count}


def persist(g: KnowledgeGraph, path) -> None:
    """Write ``nodes.jsonl`` and ``edges.jsonl`` under directory ``path``.

    Files are written to temporaries and renamed, so an interrupted write
    never leaves a half-written graph behind.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nodes = g.sorted_nodes()
    edges = g.sorted_edges()
    payloads = {
        NODES_FILE: [_header("nodes", len(nodes), g.schema)] + [n.to_json() for n in nodes],
        EDGES_FILE: [_header("edges", len(edges), g.schema)] + [e.to_json() for e in edges],
    }
    staged = []
    try:
        for name, rows in payloads.items():
            fd, tmp = tempfile.mkstemp(dir=path, prefix=f".{name}.")
            with os.fdopen(fd, "w", encoding="utf-8") as out:
                for row in rows:
                    out.write(_dumps(row) + "\n")
            staged.append((tmp, path / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _read_rows(file: Path, expected: str, schema: OntologySchema) -> List[dict]:
    if not file.exists():
        raise GraphFormatError(f"missing graph file {file}")
    rows = []
    with open(file, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{file}:{lineno}: corrupted line ({exc.msg})") from None
    if not rows:
        raise GraphFormatError(f"{file}: missing header")
    header = rows[0]
    if header.get("format") != "kgembed-graph" or header.get("file") != expected:
        raise GraphFormatError(f"{file}:1: not a {expected} file")
    if header.get("version") != FORMAT_VERSION:
        raise GraphFormatError(f"{file}:1: format version {header.get('version')} != {FORMAT_VERSION}")
    if header.get("ontology") != schema.fingerprint():
        raise GraphFormatError(f"{file}:1: ontology fingerprint mismatch")
    body = rows[1:]
    if len(body) != header.get("count"):
        raise GraphFormatError(f"{file}: expected {header.get('count')} records, found {len(body)} (truncated?)")
    return body


def load(path, schema: OntologySchema = DEFAULT_SCHEMA) -> KnowledgeGraph:
    """Load a graph written by :func:`persist`. Fails atomically."""
    path = Path(path)
    node_rows = _read_rows(path / NODES_FILE, "nodes", schema)
    edge_rows = _read_rows(path / EDGES_FILE, "edges", schema)
    g = KnowledgeGraph(schema)
    file, lineno = path / NODES_FILE, 1
    try:
        for lineno, row in enumerate(node_rows, start=2):
            g.add_node(KgNode.from_json(row))
        file = path / EDGES_FILE
        for lineno, row in enumerate(edge_rows, start=2):
            g.add_edge(KgEdge.from_json(row))
    except (KeyError, TypeError, OntologyError) as exc:
        raise GraphFormatError(f"{file}:{lineno}: invalid record ({exc})") from None
    return g


def bulk_add(g: KnowledgeGraph, nodes: Iterable[KgNode] = (), edges: Iterable[KgEdge] = ()) -> None:
    for node in nodes:
        g.add_node(node)
    for edge in edges:
        g.add_edge(edge)
