"""Classify a new report against the store: benign/malicious plus family.

The default path mirrors a single-maximum scan: start from Benign with a
best similarity of 0, and adopt the label of a stored report only when its
cosine is strictly greater. Nearest neighbours come from the LSH index;
the query is fingerprinted as a transient extra document of the corpus.

``exact_alg3`` instead recomputes every stored fingerprint over the joint
corpus (store plus query) and scans all of them. It is O(corpus) per query
and exists for conformance checks.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, StaleStoreError
from .lsh import LshIndex, Neighbor, NeighborList, minhash
from .reports import Label, TokenBag, ingest_report
from .store import ReportStore
from .vectorizer import FingerprintTable, IdfMode, fingerprint, transient_fingerprint

log = logging.getLogger(__name__)


class Decision(str, enum.Enum):
    BENIGN = "Benign"
    MALICIOUS = "Malicious"


class Vote(str, enum.Enum):
    NEAREST = "nearest"
    MAJORITY = "majority"


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 1
    vote: Vote = Vote.NEAREST
    min_similarity: float = 0.0
    idf_mode: IdfMode = IdfMode.LITERAL
    exact_alg3: bool = False
    fallback: bool = True
    max_candidates: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "vote", Vote(self.vote))
        object.__setattr__(self, "idf_mode", IdfMode(self.idf_mode))
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if not 0.0 <= self.min_similarity < 1.0:
            raise InvalidInputError("min_similarity must lie in [0, 1)")
        if self.max_candidates is not None and self.max_candidates < max(self.k, 2):
            raise InvalidInputError("max_candidates must be at least max(k, 2)")


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    family: str | None
    max_similarity: float
    neighbor_id: str | None
    fallback_used: bool
    k_used: int
    query_id: str | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.family is not None and self.decision is not Decision.MALICIOUS:
            raise InvalidInputError("a family implies a malicious decision")

    @property
    def predicted_label(self) -> Label:
        return Label.malware(self.family) if self.family else Label.benign()

    @property
    def class_name(self) -> str:
        return self.family if self.family else Decision.BENIGN.value

    def to_dict(self) -> dict:
        d = {
            "decision": self.decision.value,
            "fallback_used": self.fallback_used,
            "family": self.family,
            "max_similarity": self.max_similarity,
            "neighbor_id": self.neighbor_id,
            "query_id": self.query_id,
        }
        if self.diagnostics:
            d["diagnostics"] = self.diagnostics
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class ItemError:
    query_id: str
    message: str

    def to_json(self) -> str:
        return json.dumps({"error": self.message, "query_id": self.query_id}, sort_keys=True)


def _label_class(label: Label) -> str:
    return label.family if label.is_malware else Decision.BENIGN.value


def _decide(
    neighbors: NeighborList | list[Neighbor],
    store: ReportStore,
    cfg: DetectorConfig,
    query_id: str | None,
    fallback_used: bool,
) -> Verdict:
    diag: dict = {}
    if not neighbors:
        diag["warning"] = "no neighbour found"
        return Verdict(Decision.BENIGN, None, 0.0, None, fallback_used, cfg.k, query_id, diag)

    top = neighbors[0]
    max_sim = top.similarity
    if len(neighbors) > 1 and neighbors[1].similarity == max_sim:
        tied = {_label_class(store[n.id].label) for n in neighbors if n.similarity == max_sim}
        if len(tied) > 1:
            diag["tie"] = sorted(tied)

    considered = [n for n in neighbors[: cfg.k] if n.similarity > 0.0]
    if cfg.min_similarity > 0.0 and max_sim < cfg.min_similarity:
        diag["abstained"] = True
        considered = []

    winner: Neighbor | None = None
    if considered:
        if cfg.vote is Vote.NEAREST:
            winner = considered[0]
        else:
            votes: dict[str, list[Neighbor]] = defaultdict(list)
            for n in considered:
                votes[_label_class(store[n.id].label)].append(n)
            rank = {n.id: i for i, n in enumerate(considered)}
            best = max(
                votes.values(),
                key=lambda ns: (len(ns), sum(n.similarity for n in ns), -rank[ns[0].id]),
            )
            winner = best[0]

    if winner is None:
        return Verdict(Decision.BENIGN, None, max_sim, top.id, fallback_used, cfg.k, query_id, diag)
    label = store[winner.id].label
    if label.is_malware:
        return Verdict(Decision.MALICIOUS, label.family, max_sim, winner.id, fallback_used, cfg.k, query_id, diag)
    return Verdict(Decision.BENIGN, None, max_sim, winner.id, fallback_used, cfg.k, query_id, diag)


def _exact_neighbors(store: ReportStore, bag: Mapping[str, int], cfg: DetectorConfig, k: int) -> list[Neighbor]:
    joint = store.corpus.copy()
    joint._add_bag(bag)
    ids = store.ids()
    table = FingerprintTable.from_id_arrays(
        ids,
        [store._token_ids[i][0] for i in ids],
        [store._token_ids[i][1] for i in ids],
        joint,
        cfg.idf_mode,
    )
    sims = table.cosines(fingerprint(bag, joint, cfg.idf_mode))
    order = np.lexsort((np.arange(len(ids)), -sims))[:k]
    return [Neighbor(ids[i], float(sims[i])) for i in order]


def classify(
    store: ReportStore,
    index: LshIndex | None,
    new_bag: Mapping[str, int],
    cfg: DetectorConfig = DetectorConfig(),
    query_id: str | None = None,
) -> Verdict:
    if store.dirty:
        raise StaleStoreError("store corpus statistics are stale; refresh the store before classifying")
    if len(store) == 0:
        log.warning("classifying against an empty store")
        return Verdict(Decision.BENIGN, None, 0.0, None, False, cfg.k, query_id, {"warning": "empty store"})

    fetch = max(cfg.k, 2)
    if cfg.exact_alg3:
        return _decide(_exact_neighbors(store, new_bag, cfg, fetch), store, cfg, query_id, False)

    if index is None:
        index = store.index if store.index is not None else store.build_index()
    table = store.fingerprint_table(cfg.idf_mode)
    qfp = transient_fingerprint(new_bag, store.corpus, cfg.idf_mode)
    qsig = minhash(new_bag, index.params)
    neighbors = index.knn(
        qfp, qsig, fetch, table, fallback=cfg.fallback, min_candidates=cfg.k, max_candidates=cfg.max_candidates
    )
    return _decide(neighbors, store, cfg, query_id, neighbors.fallback_used)


def classify_many(
    store: ReportStore,
    index: LshIndex | None,
    bags: Sequence[tuple[str, Mapping[str, int]]],
    cfg: DetectorConfig = DetectorConfig(),
    workers: int = 1,
) -> list[Verdict]:
    """Classify ``(query_id, bag)`` pairs; results keep input order."""
    if index is None:
        index = store.index if store.index is not None else store.build_index()
    if len(store) and not store.dirty:
        store.fingerprint_table(cfg.idf_mode)
        index._snapshot()

    def one(item: tuple[str, Mapping[str, int]]) -> Verdict:
        return classify(store, index, item[1], cfg, query_id=item[0])

    if workers > 1 and len(bags) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, bags))
    return [one(b) for b in bags]


def classify_batch(
    store: ReportStore,
    index: LshIndex | None,
    paths: Sequence[str | Path],
    cfg: DetectorConfig = DetectorConfig(),
    workers: int = 1,
) -> list[Verdict | ItemError]:
    """Ingest and classify report files; a failing item yields an ItemError, never an abort."""
    if index is None:
        index = store.index if store.index is not None else store.build_index()
    if store.dirty:
        raise StaleStoreError("store corpus statistics are stale; refresh the store before classifying")
    if len(store):
        store.fingerprint_table(cfg.idf_mode)
        index._snapshot()

    def one(path: str | Path) -> Verdict | ItemError:
        try:
            rep = ingest_report(path, Label.unknown(), store.tokenizer_config)
        except OSError as exc:
            return ItemError(str(path), str(exc))
        return classify(store, index, rep.bag, cfg, query_id=rep.id)

    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, paths))
    return [one(p) for p in paths]


def scan_bag(store: ReportStore, bag: TokenBag, cfg: DetectorConfig = DetectorConfig()) -> Verdict:
    """Convenience wrapper using the store's attached index."""
    return classify(store, store.index, bag, cfg)
