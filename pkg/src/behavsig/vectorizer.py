"""Corpus-relative tf-idf fingerprints and cosine similarity.

tf is the raw occurrence count of a token in a report, idf is
``ln(n_docs / (1 + df))``. With ``IdfMode.LITERAL`` that idf goes
negative for tokens present in (nearly) every report; ``IdfMode.FLOOR_ZERO``
clamps it at zero.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .reports import TokenBag


class IdfMode(str, enum.Enum):
    LITERAL = "literal"
    FLOOR_ZERO = "floor0"


class CorpusStats:
    """Document count, vocabulary and document frequencies of a corpus.

    Vocabulary ids are dense and assigned in first-appearance order. Treat
    instances as immutable; only :class:`~behavsig.store.ReportStore` grows
    one in place, through :meth:`_add_bag`.
    """

    def __init__(self) -> None:
        self.n_docs = 0
        self.vocab: dict[str, int] = {}
        self._df: list[int] = []
        self.version = 0
        self._idf_cache: dict[tuple[IdfMode, int], np.ndarray] = {}

    @property
    def df(self) -> list[int]:
        return self._df

    def df_of(self, token: str) -> int:
        tid = self.vocab.get(token)
        return 0 if tid is None else self._df[tid]

    def df_by_token(self) -> dict[str, int]:
        return {t: self._df[i] for t, i in self.vocab.items()}

    def _add_bag(self, bag: Iterable[str]) -> np.ndarray:
        """Count one more document; returns the vocab ids of its tokens."""
        vocab, df = self.vocab, self._df
        ids = []
        for tok in bag:
            tid = vocab.get(tok)
            if tid is None:
                tid = vocab[tok] = len(df)
                df.append(1)
            else:
                df[tid] += 1
            ids.append(tid)
        self.n_docs += 1
        self.version += 1
        return np.asarray(ids, dtype=np.int64)

    def copy(self) -> CorpusStats:
        c = CorpusStats()
        c.n_docs = self.n_docs
        c.vocab = dict(self.vocab)
        c._df = list(self._df)
        return c

    def idf_vector(self, mode: IdfMode = IdfMode.LITERAL) -> np.ndarray:
        key = (IdfMode(mode), self.version)
        vec = self._idf_cache.get(key)
        if vec is None:
            df = np.asarray(self._df, dtype=np.float64)
            vec = np.log(self.n_docs / (1.0 + df))
            if key[0] is IdfMode.FLOOR_ZERO:
                vec = np.maximum(vec, 0.0)
            if any(k[1] != self.version for k in self._idf_cache):
                self._idf_cache.clear()
            vec.flags.writeable = False
            self._idf_cache[key] = vec
        return vec

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CorpusStats):
            return NotImplemented
        return self.n_docs == other.n_docs and self.vocab == other.vocab and self._df == other._df

    def __repr__(self) -> str:
        return f"CorpusStats(n_docs={self.n_docs}, vocab_size={len(self.vocab)})"


def build_corpus(bags: Sequence[TokenBag]) -> CorpusStats:
    if len(bags) == 0:
        raise InvalidInputError("cannot build corpus statistics from zero documents")
    stats = CorpusStats()
    for bag in bags:
        stats._add_bag(bag)
    return stats


def _idf_value(n_docs: int, df: int, mode: IdfMode) -> float:
    v = math.log(n_docs / (1 + df))
    if IdfMode(mode) is IdfMode.FLOOR_ZERO:
        v = max(0.0, v)
    return v


def idf(token_id: int, corpus: CorpusStats, mode: IdfMode = IdfMode.LITERAL) -> float:
    if not 0 <= token_id < len(corpus.df):
        raise KeyError(f"token id {token_id} not in vocabulary of size {len(corpus.df)}")
    return _idf_value(corpus.n_docs, corpus.df[token_id], mode)


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Sparse tf-idf vector: strictly increasing token ids, nonzero weights."""

    ids: np.ndarray
    weights: np.ndarray
    norm: float

    @classmethod
    def from_arrays(cls, ids, weights) -> Fingerprint:
        ids = np.asarray(ids, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        order = np.argsort(ids, kind="stable")
        ids, weights = ids[order], weights[order]
        keep = weights != 0.0
        ids, weights = ids[keep], weights[keep]
        if ids.size > 1 and np.any(np.diff(ids) <= 0):
            raise InvalidInputError("duplicate token ids in fingerprint")
        ids.flags.writeable = False
        weights.flags.writeable = False
        return cls(ids, weights, float(np.sqrt(np.dot(weights, weights))))

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, float]]) -> Fingerprint:
        entries = list(entries)
        return cls.from_arrays([e[0] for e in entries], [e[1] for e in entries])

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return int(self.ids.size)

    def scaled(self, alpha: float) -> Fingerprint:
        return Fingerprint.from_arrays(self.ids, self.weights * alpha)

    def as_dict(self) -> dict[int, float]:
        return dict(self.entries)

    def to_json(self, id: str | None = None) -> str:
        return json.dumps(
            {"id": id, "entries": [[i, w] for i, w in self.entries], "norm": self.norm},
            sort_keys=True,
        )


def fingerprint(
    bag: Mapping[str, int], corpus: CorpusStats, mode: IdfMode = IdfMode.LITERAL
) -> Fingerprint:
    """tf-idf fingerprint of ``bag``; tokens unknown to ``corpus`` are skipped."""
    vocab = corpus.vocab
    pairs = [(vocab[t], c) for t, c in bag.items() if t in vocab]
    if not pairs:
        return Fingerprint.from_arrays([], [])
    ids = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
    tf = np.fromiter((p[1] for p in pairs), dtype=np.float64, count=len(pairs))
    return Fingerprint.from_arrays(ids, tf * corpus.idf_vector(mode)[ids])


def transient_fingerprint(
    bag: Mapping[str, int], corpus: CorpusStats, mode: IdfMode = IdfMode.LITERAL
) -> Fingerprint:
    """Fingerprint of a query as if it had been added to ``corpus``.

    The query counts as document ``n_docs + 1`` and raises the df of each of
    its tokens by one. Tokens new to the corpus get ids past the end of the
    vocabulary (in sorted token order) so they weigh in the query norm but
    never match a stored fingerprint.
    """
    vocab, df = corpus.vocab, corpus.df
    n = corpus.n_docs + 1
    novel = len(vocab)
    ids, weights = [], []
    for tok in sorted(bag):
        tid = vocab.get(tok)
        if tid is None:
            tid, d = novel, 1
            novel += 1
        else:
            d = df[tid] + 1
        ids.append(tid)
        weights.append(bag[tok] * _idf_value(n, d, mode))
    return Fingerprint.from_arrays(ids, weights)


def dot(a: Fingerprint, b: Fingerprint) -> float:
    _, ia, ib = np.intersect1d(a.ids, b.ids, assume_unique=True, return_indices=True)
    if ia.size == 0:
        return 0.0
    return float(np.dot(a.weights[ia], b.weights[ib]))


def cosine(a: Fingerprint, b: Fingerprint) -> float:
    """Cosine similarity; 0.0 when either fingerprint has zero norm."""
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    c = dot(a, b) / (a.norm * b.norm)
    return min(1.0, max(-1.0, c))


class FingerprintTable:
    """Row-aligned fingerprints of many reports, backed by a CSR matrix.

    Used for bulk scoring of a query against a subset of rows.
    """

    def __init__(self, ids: Sequence[str], matrix: sp.csr_matrix) -> None:
        self.ids = list(ids)
        self.row_of = {rid: i for i, rid in enumerate(self.ids)}
        matrix.sort_indices()
        self.matrix = matrix
        self.norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel())

    @classmethod
    def from_id_arrays(
        cls,
        ids: Sequence[str],
        token_ids: Sequence[np.ndarray],
        counts: Sequence[np.ndarray],
        corpus: CorpusStats,
        mode: IdfMode = IdfMode.LITERAL,
    ) -> FingerprintTable:
        """Build from per-report (vocab id, count) arrays already resolved against ``corpus``."""
        idf_vec = corpus.idf_vector(mode)
        lengths = np.fromiter((a.size for a in token_ids), dtype=np.int64, count=len(token_ids))
        indptr = np.zeros(len(token_ids) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        if len(token_ids):
            cols = np.concatenate(token_ids).astype(np.int64, copy=False)
            tf = np.concatenate(counts).astype(np.float64, copy=False)
        else:
            cols = np.zeros(0, dtype=np.int64)
            tf = np.zeros(0, dtype=np.float64)
        data = tf * idf_vec[cols]
        m = sp.csr_matrix((data, cols, indptr), shape=(len(token_ids), len(idf_vec)))
        m.eliminate_zeros()
        return cls(ids, m)

    @classmethod
    def from_bags(
        cls,
        items: Iterable[tuple[str, Mapping[str, int]]],
        corpus: CorpusStats,
        mode: IdfMode = IdfMode.LITERAL,
    ) -> FingerprintTable:
        ids, tok_ids, counts = [], [], []
        vocab = corpus.vocab
        for rid, bag in items:
            pairs = [(vocab[t], c) for t, c in bag.items() if t in vocab]
            ids.append(rid)
            tok_ids.append(np.array([p[0] for p in pairs], dtype=np.int64))
            counts.append(np.array([p[1] for p in pairs], dtype=np.float64))
        return cls.from_id_arrays(ids, tok_ids, counts, corpus, mode)

    @classmethod
    def from_mapping(cls, fps: Mapping[str, Fingerprint]) -> FingerprintTable:
        ids = sorted(fps)
        width = 1 + max((int(fps[i].ids[-1]) for i in ids if len(fps[i])), default=-1)
        indptr = np.zeros(len(ids) + 1, dtype=np.int64)
        np.cumsum([len(fps[i]) for i in ids], out=indptr[1:])
        cols = np.concatenate([fps[i].ids for i in ids]) if ids else np.zeros(0, np.int64)
        data = np.concatenate([fps[i].weights for i in ids]) if ids else np.zeros(0)
        return cls(ids, sp.csr_matrix((data, cols, indptr), shape=(len(ids), width)))

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rid: str) -> bool:
        return rid in self.row_of

    def __getitem__(self, rid: str) -> Fingerprint:
        row = self.row_of[rid]
        lo, hi = self.matrix.indptr[row], self.matrix.indptr[row + 1]
        return Fingerprint.from_arrays(self.matrix.indices[lo:hi], self.matrix.data[lo:hi])

    def _dense_query(self, query: Fingerprint) -> np.ndarray:
        q = np.zeros(self.matrix.shape[1], dtype=np.float64)
        inside = query.ids < q.size
        q[query.ids[inside]] = query.weights[inside]
        return q

    def cosines(self, query: Fingerprint, rows: np.ndarray | None = None) -> np.ndarray:
        """Cosine of ``query`` against ``rows`` (all rows when None)."""
        n = len(self.ids) if rows is None else len(rows)
        if query.norm == 0.0 or n == 0:
            return np.zeros(n)
        m = self.matrix if rows is None else self.matrix[rows]
        norms = self.norms if rows is None else self.norms[rows]
        dots = m @ self._dense_query(query)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(norms > 0, dots / (norms * query.norm), 0.0)
        return np.clip(out, -1.0, 1.0)
