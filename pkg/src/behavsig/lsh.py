"""Minhash signatures and banded LSH for approximate nearest-neighbour search.

Signatures are computed over the token *set* of a report. The i-th hash
function is ``mix64(base(token) ^ mix64(seed ^ i))`` where ``base`` is a
64-bit BLAKE2b digest of the token and ``mix64`` the splitmix64 finaliser.
A signature of ``N = b * r`` values is cut into ``b`` bands of ``r`` rows;
each band is a bucket key. Candidates are the union of the query's bucket
co-occupants, re-ranked by exact cosine.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConflictError, CorruptionError, IncompatibleFormatError, InvalidInputError, ParamsMismatchError
from .vectorizer import Fingerprint, FingerprintTable, cosine

INDEX_FORMAT_VERSION = 1
MASK64 = (1 << 64) - 1
EMPTY_VALUE = np.uint64(MASK64)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser, vectorised over uint64 arrays."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=1 << 20)
def token_hash(token: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(token.encode("utf-8", "surrogatepass"), digest_size=8).digest(), "little"
    )


@dataclass(frozen=True)
class MinHashParams:
    n_hashes: int = 128
    n_bands: int = 32
    rows_per_band: int = 4
    seed: int = 1

    def __post_init__(self) -> None:
        if min(self.n_hashes, self.n_bands, self.rows_per_band) < 1:
            raise InvalidInputError("n_hashes, n_bands and rows_per_band must be positive")
        if self.n_bands * self.rows_per_band != self.n_hashes:
            raise InvalidInputError(
                f"bands x rows must equal n_hashes: {self.n_bands} x {self.rows_per_band} != {self.n_hashes}"
            )

    @classmethod
    def parse(cls, text: str, seed: int = 1) -> MinHashParams:
        """Parse ``"N,b,r"``."""
        try:
            n, b, r = (int(x) for x in text.split(","))
        except ValueError:
            raise InvalidInputError(f"expected N,b,r but got {text!r}") from None
        return cls(n, b, r, seed)

    @property
    def threshold(self) -> float:
        """Approximate Jaccard at which band collision becomes likely, (1/b)^(1/r)."""
        return (1.0 / self.n_bands) ** (1.0 / self.rows_per_band)

    def collision_probability(self, jaccard: float) -> float:
        return 1.0 - (1.0 - jaccard**self.rows_per_band) ** self.n_bands

    def to_dict(self) -> dict:
        return {
            "n_bands": self.n_bands,
            "n_hashes": self.n_hashes,
            "rows_per_band": self.rows_per_band,
            "seed": self.seed,
        }


@lru_cache(maxsize=64)
def _function_seeds(n_hashes: int, seed: int) -> np.ndarray:
    i = np.arange(n_hashes, dtype=np.uint64)
    out = mix64(np.uint64(seed & MASK64) ^ i)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class MinHashSignature:
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MinHashSignature):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def agreement(self, other: MinHashSignature) -> float:
        """Fraction of equal positions; estimates the Jaccard similarity of the sets."""
        if len(self) != len(other):
            raise InvalidInputError("signatures of different length")
        return float(np.mean(self.values == other.values))

    def band_keys(self, params: MinHashParams) -> list[bytes]:
        raw = self.values.tobytes()
        w = 8 * params.rows_per_band
        return [raw[j * w : (j + 1) * w] for j in range(params.n_bands)]

    def hex(self) -> str:
        return self.values.astype(">u8").tobytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> MinHashSignature:
        v = np.frombuffer(bytes.fromhex(text), dtype=">u8").astype(np.uint64)
        v.flags.writeable = False
        return cls(v)


_CHUNK = 2048


def minhash_of_hashes(base: np.ndarray, params: MinHashParams) -> MinHashSignature:
    """Signature from precomputed 64-bit token hashes."""
    seeds = _function_seeds(params.n_hashes, params.seed)
    out = np.full(params.n_hashes, EMPTY_VALUE, dtype=np.uint64)
    base = np.asarray(base, dtype=np.uint64)
    for lo in range(0, base.size, _CHUNK):
        h = mix64(base[lo : lo + _CHUNK, None] ^ seeds[None, :])
        np.minimum(out, h.min(axis=0), out=out)
    out.flags.writeable = False
    return MinHashSignature(out)


def minhash(tokens: Iterable[str], params: MinHashParams = MinHashParams()) -> MinHashSignature:
    """Minhash signature of a token set (duplicates are irrelevant)."""
    uniq = set(tokens)
    base = np.fromiter((token_hash(t) for t in uniq), dtype=np.uint64, count=len(uniq))
    return minhash_of_hashes(base, params)


@dataclass(frozen=True)
class Neighbor:
    id: str
    similarity: float


class NeighborList(list):
    """Ranked neighbours plus how they were obtained."""

    def __init__(self, items=(), fallback_used: bool = False, n_candidates: int = 0) -> None:
        super().__init__(items)
        self.fallback_used = fallback_used
        self.n_candidates = n_candidates


@dataclass
class _Snapshot:
    version: int
    ids: list[str]
    row_of: dict[str, int]
    bands: list[dict[bytes, np.ndarray]]
    table_rows: dict[int, tuple[object, np.ndarray]] = field(default_factory=dict)


class LshIndex:
    """Banded minhash LSH over report ids.

    Single writer, many readers: :meth:`insert` and :meth:`remove` must not
    run concurrently with anything else; queries may run concurrently.
    """

    def __init__(self, params: MinHashParams = MinHashParams()) -> None:
        self.params = params
        self.buckets: list[dict[bytes, set[str]]] = [{} for _ in range(params.n_bands)]
        self.signatures: dict[str, MinHashSignature] = {}
        self._version = 0
        self._snap: _Snapshot | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.signatures)

    def __contains__(self, rid: str) -> bool:
        return rid in self.signatures

    def _check(self, sig: MinHashSignature) -> None:
        if len(sig) != self.params.n_hashes:
            raise InvalidInputError(
                f"signature has {len(sig)} values, index expects {self.params.n_hashes}"
            )

    def insert(self, rid: str, sig: MinHashSignature) -> None:
        if rid in self.signatures:
            raise ConflictError(f"id {rid!r} already indexed")
        self._check(sig)
        for table, key in zip(self.buckets, sig.band_keys(self.params)):
            table.setdefault(key, set()).add(rid)
        self.signatures[rid] = sig
        self._version += 1

    def remove(self, rid: str) -> None:
        sig = self.signatures.pop(rid)
        for table, key in zip(self.buckets, sig.band_keys(self.params)):
            members = table[key]
            members.discard(rid)
            if not members:
                del table[key]
        self._version += 1

    def candidates(self, sig: MinHashSignature) -> set[str]:
        self._check(sig)
        out: set[str] = set()
        for table, key in zip(self.buckets, sig.band_keys(self.params)):
            members = table.get(key)
            if members:
                out |= members
        return out

    def verify(self) -> bool:
        """Recompute bucket membership from the stored signatures and compare."""
        rebuilt = LshIndex(self.params)
        for rid, sig in self.signatures.items():
            rebuilt.insert(rid, sig)
        return rebuilt.buckets == self.buckets

    # query fast path -------------------------------------------------

    def _snapshot(self) -> _Snapshot:
        snap = self._snap
        if snap is not None and snap.version == self._version:
            return snap
        with self._lock:
            if self._snap is not None and self._snap.version == self._version:
                return self._snap
            ids = sorted(self.signatures)
            row_of = {rid: i for i, rid in enumerate(ids)}
            bands = [
                {key: np.fromiter(sorted(row_of[m] for m in members), dtype=np.int64, count=len(members))
                 for key, members in table.items()}
                for table in self.buckets
            ]
            self._snap = _Snapshot(self._version, ids, row_of, bands)
            return self._snap

    def _candidate_rows(self, snap: _Snapshot, sig: MinHashSignature, budget: int | None = None) -> np.ndarray:
        hits = [b[k] for b, k in zip(snap.bands, sig.band_keys(self.params)) if k in b]
        if not hits:
            return np.zeros(0, dtype=np.int64)
        if budget is not None:
            return _budgeted_union(hits, budget)
        if len(hits) == 1:
            return hits[0]
        mask = np.zeros(len(snap.ids), dtype=bool)
        for h in hits:
            mask[h] = True
        return np.flatnonzero(mask)

    @staticmethod
    def _table_rows(snap: _Snapshot, table: FingerprintTable) -> np.ndarray:
        cached = snap.table_rows.get(id(table))
        if cached is not None and cached[0] is table:
            return cached[1]
        try:
            rows = np.fromiter((table.row_of[i] for i in snap.ids), dtype=np.int64, count=len(snap.ids))
        except KeyError as exc:
            raise KeyError(f"no fingerprint for indexed id {exc.args[0]!r}") from None
        if len(snap.table_rows) >= 4:
            snap.table_rows.clear()
        snap.table_rows[id(table)] = (table, rows)
        return rows

    def knn(
        self,
        query_fp: Fingerprint,
        query_sig: MinHashSignature,
        k: int,
        fingerprints: FingerprintTable | Mapping[str, Fingerprint],
        fallback: bool = True,
        min_candidates: int | None = None,
        max_candidates: int | None = None,
    ) -> NeighborList:
        """``k`` nearest indexed reports by exact cosine among LSH candidates.

        Ties rank by ascending id. When fewer than ``min_candidates``
        (default ``k``) candidates are found and ``fallback`` is set, every
        indexed report is scored instead.

        ``max_candidates`` bounds the re-ranking work: colliding buckets are
        taken smallest first and the union stops growing once it reaches the
        budget, so per-query cost no longer grows with bucket sizes.
        """
        if k < 1:
            raise InvalidInputError("k must be at least 1")
        if max_candidates is not None and max_candidates < max(k, min_candidates or 0):
            raise InvalidInputError("max_candidates must be at least k and min_candidates")
        self._check(query_sig)
        snap = self._snapshot()
        if not snap.ids:
            return NeighborList()
        rows = self._candidate_rows(snap, query_sig, max_candidates)
        n_cand = int(rows.size)
        used_fallback = False
        if n_cand < (k if min_candidates is None else min_candidates) and fallback:
            rows = np.arange(len(snap.ids))
            used_fallback = True
        if rows.size == 0:
            return NeighborList(n_candidates=0)

        if isinstance(fingerprints, FingerprintTable):
            trows = self._table_rows(snap, fingerprints)[rows]
            sims = fingerprints.cosines(query_fp, trows)
        else:
            sims = np.array([cosine(query_fp, fingerprints[snap.ids[r]]) for r in rows])

        top = _top_k(sims, rows, k)
        return NeighborList(
            (Neighbor(snap.ids[rows[i]], float(sims[i])) for i in top),
            fallback_used=used_fallback,
            n_candidates=n_cand,
        )

    # persistence -----------------------------------------------------

    def header(self) -> dict:
        return {"format": "minhash-lsh", "format_version": INDEX_FORMAT_VERSION, **self.params.to_dict()}

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for rid, sig in self.signatures.items():
                fh.write(_sig_line(rid, sig))

    def append(self, path: str | Path, rid: str, sig: MinHashSignature) -> None:
        """Append ``rid`` to an index file written by :meth:`save`, inserting it first if absent."""
        if rid not in self.signatures:
            self.insert(rid, sig)
        elif self.signatures[rid] != sig:
            raise ConflictError(f"id {rid!r} already indexed with a different signature")
        with Path(path).open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(_sig_line(rid, sig))

    @classmethod
    def load(cls, path: str | Path, expected: MinHashParams | None = None) -> LshIndex:
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            first = fh.readline()
            if not first.strip():
                raise CorruptionError(path, 1, "missing index header")
            try:
                head = json.loads(first)
                version = int(head["format_version"])
                params = MinHashParams(
                    int(head["n_hashes"]), int(head["n_bands"]), int(head["rows_per_band"]), int(head["seed"])
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptionError(path, 1, f"bad index header: {exc}") from None
            if version != INDEX_FORMAT_VERSION:
                raise IncompatibleFormatError(path, version, INDEX_FORMAT_VERSION)
            if expected is not None and (
                expected.n_hashes != params.n_hashes or expected.seed != params.seed
                or expected.n_bands != params.n_bands
            ):
                raise ParamsMismatchError(
                    f"{path}: index built with {params.to_dict()}, requested {expected.to_dict()}"
                )
            index = cls(params)
            for lineno, line in enumerate(fh, 2):
                if not line.endswith("\n"):
                    raise CorruptionError(path, lineno, "truncated record")
                try:
                    rec = json.loads(line)
                    sig = MinHashSignature.from_hex(rec["sig"])
                    index.insert(rec["id"], sig)
                except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
                    raise CorruptionError(path, lineno, f"bad signature record: {exc}") from None
        return index


def _sig_line(rid: str, sig: MinHashSignature) -> str:
    return json.dumps({"id": rid, "sig": sig.hex()}, sort_keys=True) + "\n"


def _budgeted_union(hits: list[np.ndarray], budget: int) -> np.ndarray:
    """Union of bucket row arrays, smallest buckets first, capped near ``budget`` rows.

    The bucket that crosses the budget contributes only its lowest rows.
    """
    order = sorted(range(len(hits)), key=lambda i: (hits[i].size, i))
    taken: list[np.ndarray] = []
    total = 0
    for i in order:
        h = hits[i]
        room = budget - total
        if room <= 0:
            break
        part = h if h.size <= room else h[:room]
        taken.append(part)
        total += part.size
    rows = np.unique(np.concatenate(taken))
    return rows[:budget]


def _top_k(sims: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best scores; ties go to the lower row (= lower id)."""
    n = sims.size
    if k < n:
        kth = np.partition(sims, n - k)[n - k]
        pos = np.flatnonzero(sims >= kth)
    else:
        pos = np.arange(n)
    order = np.lexsort((rows[pos], -sims[pos]))
    return pos[order[:k]]


def brute_force_knn(
    query_fp: Fingerprint, fingerprints: Mapping[str, Fingerprint], k: int
) -> list[Neighbor]:
    """Exhaustive cosine k-NN, ties by ascending id."""
    scored = sorted(((-cosine(query_fp, fp), rid) for rid, fp in fingerprints.items()))
    return [Neighbor(rid, -s) for s, rid in scored[:k]]
