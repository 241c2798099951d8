"""Embedding backends, an exact cosine index, and the in-batch ranking loss."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ._http import BackendError, RetryPolicy, call_with_retry, post_json

QUERY = "query"
PASSAGE = "passage"
_TAGS = ("[EN] ", "[EL] ")


class EmbeddingError(ValueError):
    """Bad embedding input or output (zero vectors, dim mismatch, ...)."""


class EmbeddingBackend(Protocol):
    name: str
    dim: int

    def embed_batch(self, texts: Sequence[str], role: str = PASSAGE) -> np.ndarray:
        ...


def _strip_tag(text: str) -> str:
    for tag in _TAGS:
        if text.startswith(tag):
            return text[len(tag):]
    return text


class MockEmbedder:
    """Hashed bag-of-words vectors.

    Tokens are whitespace-split after casefolding and removing the mock
    translator's language tag, so a translated anchor embeds exactly like
    its source. Role is ignored.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.name = f"mock-embedder-{dim}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed_batch(self, texts: Sequence[str], role: str = PASSAGE) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for token in _strip_tag(text).casefold().split():
                out[row, self._bucket(token)] += 1.0
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class RemoteEmbedder:
    """HTTP embedding service: ``POST {input: [texts], model} -> {data: [{embedding}]}``.

    ``query_prefix``/``passage_prefix`` let E5-style models receive their
    ``"query: "``/``"passage: "`` markers.
    """

    def __init__(self, endpoint: str, model: str, dim: Optional[int] = None, auth_env: Optional[str] = None,
                 query_prefix: str = "", passage_prefix: str = "", timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self.auth_env = auth_env
        self.prefixes = {QUERY: query_prefix, PASSAGE: passage_prefix}
        self.timeout = timeout
        self.name = f"remote-embedder:{model}"

    def embed_batch(self, texts: Sequence[str], role: str = PASSAGE) -> np.ndarray:
        prefix = self.prefixes.get(role, "")
        body = post_json(self.endpoint, {"input": [prefix + t for t in texts], "model": self.model},
                         self.auth_env, self.timeout)
        try:
            rows = [item["embedding"] for item in body["data"]]
            vectors = np.asarray(rows, dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed embedding response: {exc}") from None
        if vectors.ndim != 2 or vectors.shape[0] != len(texts):
            raise BackendError(f"expected {len(texts)} embeddings, got shape {vectors.shape}")
        if self.dim is None:
            self.dim = vectors.shape[1]
        elif vectors.shape[1] != self.dim:
            raise BackendError(f"embedding dim {vectors.shape[1]} != {self.dim}")
        return vectors


def read_vectors(path) -> Dict[str, np.ndarray]:
    """Load a precomputed-vector JSONL file of ``{id, vector}`` rows."""
    vectors: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                vectors[str(obj["id"])] = np.asarray(obj["vector"], dtype=float)
            except (ValueError, KeyError, TypeError) as exc:
                raise EmbeddingError(f"{path}:{lineno}: bad vector record ({exc})") from None
    return vectors


def write_vectors(path, ids: Sequence[str], vectors: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as out:
        for doc_id, vec in zip(ids, vectors):
            out.write(json.dumps({"id": doc_id, "vector": [float(x) for x in vec]}) + "\n")


class PrecomputedEmbeddings:
    """Backend over a vector file. Looked up by id, not by text."""

    def __init__(self, vectors: Dict[str, np.ndarray], name: str = "precomputed"):
        if not vectors:
            raise EmbeddingError("no vectors")
        dims = {v.shape[-1] for v in vectors.values()}
        if len(dims) != 1:
            raise EmbeddingError(f"inconsistent vector dims {sorted(dims)}")
        self.vectors = vectors
        self.dim = dims.pop()
        self.name = name

    @classmethod
    def from_file(cls, path) -> "PrecomputedEmbeddings":
        return cls(read_vectors(path), name=f"file:{path}")

    def embed_ids(self, ids: Sequence[str], role: str = PASSAGE) -> np.ndarray:
        missing = [i for i in ids if i not in self.vectors]
        if missing:
            raise EmbeddingError(f"no precomputed vector for {missing[:5]}")
        return np.stack([self.vectors[i] for i in ids])


def embed_records(backend, ids: Sequence[str], texts: Sequence[str], role: str = PASSAGE,
                  batch_size: int = 32, retry: RetryPolicy = RetryPolicy(backoff=0.0)) -> np.ndarray:
    """Embed in batches; precomputed backends are looked up by id."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if isinstance(backend, PrecomputedEmbeddings):
        return backend.embed_ids(ids, role)
    parts = []
    for start in range(0, len(texts), batch_size):
        batch = list(texts[start : start + batch_size])
        vectors, _ = call_with_retry(lambda: np.asarray(backend.embed_batch(batch, role), dtype=float), retry,
                                     what=f"embed batch @{start}")
        if vectors.shape[0] != len(batch):
            raise BackendError(f"backend returned {vectors.shape[0]} vectors for {len(batch)} texts")
        parts.append(vectors)
    if not parts:
        return np.zeros((0, getattr(backend, "dim", 0) or 0))
    return np.vstack(parts)


def _unit_rows(matrix: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    if not np.all(np.isfinite(matrix)):
        bad = [ids[i] for i in np.where(~np.isfinite(matrix).all(axis=1))[0]]
        raise EmbeddingError(f"non-finite embedding for {bad[:5]}")
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.where(norms == 0)[0]
    if len(zero):
        raise EmbeddingError(f"zero embedding for {[ids[i] for i in zero[:5]]}")
    return matrix / norms[:, None]


@dataclass(frozen=True)
class VectorIndex:
    """Unit vectors sorted by doc id. Immutable once built."""

    ids: Tuple[str, ...]
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_vectors(cls, ids: Sequence[str], vectors: np.ndarray) -> "VectorIndex":
        ids = list(ids)
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise EmbeddingError(f"duplicate doc ids {dup[:5]}")
        vectors = np.asarray(vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise EmbeddingError(f"expected {len(ids)} vectors, got shape {vectors.shape}")
        order = sorted(range(len(ids)), key=ids.__getitem__)
        ids = [ids[i] for i in order]
        unit = _unit_rows(vectors[order], ids)
        unit.setflags(write=False)
        return cls(tuple(ids), unit)


def build_index(docs: Sequence[Tuple[str, str]], backend, batch_size: int = 32,
                retry: RetryPolicy = RetryPolicy(backoff=0.0)) -> VectorIndex:
    """Embed ``(doc_id, text)`` pairs as passages and index them."""
    if not docs:
        raise EmbeddingError("cannot index an empty document list")
    ids = [d for d, _ in docs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise EmbeddingError(f"duplicate doc ids {dup[:5]}")
    vectors = embed_records(backend, ids, [t for _, t in docs], PASSAGE, batch_size, retry)
    return VectorIndex.from_vectors(ids, vectors)


def top_k(index: VectorIndex, query_vector, k: int) -> List[Tuple[str, float]]:
    """Exact cosine search. Ties resolve to the smaller doc id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    q = np.asarray(query_vector, dtype=float).ravel()
    if q.shape[0] != index.dim:
        raise EmbeddingError(f"query dim {q.shape[0]} != index dim {index.dim}")
    norm = np.linalg.norm(q)
    if norm == 0 or not np.isfinite(norm):
        raise EmbeddingError("query vector has zero or non-finite norm")
    scores = index.vectors @ (q / norm)
    # index rows are sorted by id, so a stable sort keeps ties in id order
    order = np.argsort(-scores, kind="stable")[: min(k, len(index))]
    return [(index.ids[i], float(scores[i])) for i in order]


def search(index: VectorIndex, query_vectors: np.ndarray, k: int) -> List[List[Tuple[str, float]]]:
    return [top_k(index, q, k) for q in np.atleast_2d(query_vectors)]


def mnrl_loss(anchors, positives, scale: float = 20.0) -> float:
    """Multiple negatives ranking loss over one batch.

    Row ``i`` of the scaled cosine matrix is a softmax over all positives in
    the batch with target ``i``; the loss is the mean negative log-likelihood.
    """
    a = np.asarray(anchors, dtype=float)
    p = np.asarray(positives, dtype=float)
    if a.ndim != 2 or p.ndim != 2:
        raise EmbeddingError("anchors and positives must be 2-d (batch, dim)")
    if a.shape[0] == 0 or a.shape[0] != p.shape[0]:
        raise EmbeddingError(f"batch sizes must be equal and positive, got {a.shape[0]} and {p.shape[0]}")
    if a.shape[1] != p.shape[1]:
        raise EmbeddingError(f"dim mismatch {a.shape[1]} != {p.shape[1]}")
    if not scale > 0 or not math.isfinite(scale):
        raise ValueError("scale must be a positive finite number")
    a = _unit_rows(a, [f"anchor[{i}]" for i in range(len(a))])
    p = _unit_rows(p, [f"positive[{i}]" for i in range(len(p))])
    logits = scale * (a @ p.T)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    loss = float(np.mean(lse - np.diag(logits)))
    return max(loss, 0.0)
