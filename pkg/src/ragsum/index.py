"""The knowledge base: persisted candidate embeddings with exact and
inverted-file (IVF) approximate maximum-inner-product search.

Entries store the document id, its token ids, and the unit-norm [CLS]
embedding produced by the memory encoder. Search results are deliberately
stale between refreshes; training recomputes candidate scores against the
live encoder for back-propagation.

Tie rule everywhere: equal scores are ordered by ascending document id.

File format (all integers unsigned 32-bit little-endian, floats 32-bit
little-endian): header ``d_model, count, epoch``; per entry ``id_len,
id_utf8, n_tokens, token_ids (int32), embedding (d_model float32)``.
The coarse quantizer is not persisted; retrain after loading if needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor
from .data import CLS_ID, DOC_ID, TokenSequence
from .encoder import EncodedDocument, EncoderStack, relevance_score
from .errors import (ConfigError, ContractError, IngestionError,
                     RetrievalError, RetrievalUnderflowError)


@dataclass
class IndexEntry:
    doc_id: str
    token_ids: np.ndarray
    embedding: np.ndarray


@dataclass
class Quantizer:
    """Coarse inverted-file quantizer: unit-norm centroids + assignments."""

    centroids: np.ndarray
    assignments: np.ndarray
    n_list: int
    iters: int
    seed: int


@dataclass
class MemoryIndex:
    d_model: int
    entries: list[IndexEntry] = field(default_factory=list)
    epoch: int = 0
    quantizer: Optional[Quantizer] = None
    _matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([e.embedding for e in self.entries])
        return self._matrix

    def invalidate(self) -> None:
        self._matrix = None

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<III", self.d_model, len(self.entries), self.epoch))
            for e in self.entries:
                raw_id = e.doc_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw_id)))
                fh.write(raw_id)
                toks = np.asarray(e.token_ids, dtype="<i4")
                fh.write(struct.pack("<I", toks.size))
                fh.write(toks.tobytes())
                fh.write(np.asarray(e.embedding, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "MemoryIndex":
        path = Path(path)
        with open(path, "rb") as fh:
            d_model, count, epoch = struct.unpack("<III", fh.read(12))
            entries = []
            for _ in range(count):
                (id_len,) = struct.unpack("<I", fh.read(4))
                doc_id = fh.read(id_len).decode("utf-8")
                (n_tok,) = struct.unpack("<I", fh.read(4))
                toks = np.frombuffer(fh.read(4 * n_tok), dtype="<i4").astype(np.int64)
                emb = np.frombuffer(fh.read(4 * d_model), dtype="<f4").astype(np.float64)
                entries.append(IndexEntry(doc_id, toks, emb))
        return cls(d_model=d_model, entries=entries, epoch=epoch)


@dataclass
class RetrievedCandidate:
    """A re-encoded top-k hit ready for the copy generator."""

    doc_id: str
    stale_score: float
    score: Tensor
    token_states: Tensor
    token_ids: np.ndarray


def _entry_sequence(entry: IndexEntry) -> TokenSequence:
    ids = entry.token_ids
    return TokenSequence(ids, (ids == CLS_ID) | (ids == DOC_ID))


def build_index(memory_corpus: Iterable[tuple[str, TokenSequence]],
                memory_encoder: EncoderStack) -> MemoryIndex:
    """Encode every document with the memory encoder and store its cls_unit."""
    index = MemoryIndex(d_model=memory_encoder.config.d_model)
    seen: set[str] = set()
    for doc_id, seq in memory_corpus:
        if doc_id in seen:
            raise IngestionError(f"duplicate document id {doc_id!r} in memory corpus")
        seen.add(doc_id)
        doc = memory_encoder.encode(seq)
        index.entries.append(IndexEntry(doc_id, np.asarray(seq.ids, dtype=np.int64),
                                        doc.cls_unit.data.copy()))
    if not index.entries:
        raise IngestionError("memory corpus is empty")
    index.invalidate()
    return index


def _ranked(index: MemoryIndex, scores: np.ndarray, candidates: np.ndarray,
            k: int) -> list[tuple[str, float]]:
    order = sorted(candidates.tolist(),
                   key=lambda i: (-scores[i], index.entries[i].doc_id))
    return [(index.entries[i].doc_id, float(scores[i])) for i in order[:k]]


def search_exact(index: MemoryIndex, query, k: int) -> list[tuple[str, float]]:
    """Full inner-product scan, descending score, ties by ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise RetrievalError("cannot search an empty index")
    q = query.data if isinstance(query, Tensor) else np.asarray(query)
    scores = index.matrix @ q
    return _ranked(index, scores, np.arange(len(index)), k)


def search_approx(index: MemoryIndex, query, k: int, n_probe: int) -> list[tuple[str, float]]:
    """Exact search restricted to the ``n_probe`` cells nearest the query."""
    if index.quantizer is None:
        raise ConfigError("approximate search requires a trained quantizer")
    quant = index.quantizer
    if not 1 <= n_probe <= quant.n_list:
        raise ConfigError(f"n_probe must be in [1, {quant.n_list}], got {n_probe}")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise RetrievalError("cannot search an empty index")
    q = query.data if isinstance(query, Tensor) else np.asarray(query)
    cell_scores = quant.centroids @ q
    cells = sorted(range(quant.n_list), key=lambda c: (-cell_scores[c], c))[:n_probe]
    member = np.isin(quant.assignments, cells)
    candidates = np.nonzero(member)[0]
    if candidates.size == 0:
        return []
    scores = index.matrix @ q
    return _ranked(index, scores, candidates, k)


def train_quantizer(index: MemoryIndex, n_list: int, iters: int = 25,
                    seed: int = 0) -> Quantizer:
    """Spherical k-means over the stored embeddings (fixed seed).

    Empty clusters are re-seeded from the largest cluster's farthest point.
    """
    n = len(index)
    if n == 0:
        raise RetrievalError("cannot train a quantizer on an empty index")
    if not 1 <= n_list <= n:
        raise ConfigError(f"n_list must be in [1, {n}], got {n_list}")
    X = index.matrix
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=n_list, replace=False)].copy()
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        assignments = np.argmax(X @ centroids.T, axis=1)
        for c in range(n_list):
            members = np.nonzero(assignments == c)[0]
            if members.size == 0:
                sizes = np.bincount(assignments, minlength=n_list)
                big = int(np.argmax(sizes))
                big_members = np.nonzero(assignments == big)[0]
                farthest = big_members[int(np.argmin(X[big_members] @ centroids[big]))]
                centroids[c] = X[farthest]
            else:
                m = X[members].mean(axis=0)
                centroids[c] = m / max(float(np.linalg.norm(m)), 1e-12)
    assignments = np.argmax(X @ centroids.T, axis=1)
    quant = Quantizer(centroids=centroids, assignments=assignments,
                      n_list=n_list, iters=iters, seed=seed)
    index.quantizer = quant
    return quant


def refresh(index: MemoryIndex, memory_encoder: EncoderStack) -> MemoryIndex:
    """Re-encode every stored document with the current memory encoder."""
    for entry in index.entries:
        doc = memory_encoder.encode(_entry_sequence(entry))
        entry.embedding = doc.cls_unit.data.copy()
    index.invalidate()
    if index.quantizer is not None:
        q = index.quantizer
        train_quantizer(index, q.n_list, q.iters, q.seed)
    index.epoch += 1
    return index


def retrieve_candidates(index: MemoryIndex, query_doc: EncodedDocument, k: int,
                        memory_encoder: EncoderStack,
                        retrieved_encoder: EncoderStack,
                        exclusions: frozenset[str] | set[str] = frozenset(),
                        n_probe: Optional[int] = None) -> list[RetrievedCandidate]:
    """Top-k search, gold exclusion, then differentiable re-encoding.

    Each surviving hit is encoded twice: by the memory encoder (fresh score
    against the live query CLS, on the tape) and by the retrieved encoder
    (per-token states for the copy mechanism). Result order is descending
    recomputed score, ties by ascending id.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    want = k + len(exclusions)
    if n_probe is None:
        hits = search_exact(index, query_doc.cls_unit, want)
    else:
        hits = search_approx(index, query_doc.cls_unit, want, n_probe)
    survivors = [(doc_id, score) for doc_id, score in hits if doc_id not in exclusions][:k]
    if len(survivors) < k:
        shortfall = k - len(survivors)
        raise RetrievalUnderflowError(
            f"retrieval underflow: wanted {k} candidates, found {len(survivors)}",
            shortfall)
    by_id = {e.doc_id: e for e in index.entries}
    out = []
    for doc_id, stale in survivors:
        entry = by_id[doc_id]
        seq = _entry_sequence(entry)
        mem_doc = memory_encoder.encode(seq)
        score = relevance_score(mem_doc.cls_unit, query_doc.cls_unit)
        ret_doc = retrieved_encoder.encode(seq)
        out.append(RetrievedCandidate(doc_id=doc_id, stale_score=stale, score=score,
                                      token_states=ret_doc.hidden,
                                      token_ids=entry.token_ids))
    out.sort(key=lambda c: (-float(c.score.data), c.doc_id))
    return out
