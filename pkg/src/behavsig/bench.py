"""Dataset-size and scalability benchmarks over synthetic corpora.

Each ladder rung draws a fresh corpus of the requested size from the same
generator (family proportions and benign share are kept), holds out 10%
with a stratified split, and times two stages: tf-idf fingerprinting of
every report from raw text, and LSH matching of the held-out split against
an index over the rest. Timings are wall clock, best of ``repeats``.
"""

from __future__ import annotations

import csv
import gc
import io
import logging
import platform
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from . import __version__
from .detector import DetectorConfig, classify_many
from .evaluation import (
    BENIGN,
    EvaluationResult,
    FoldPlan,
    binary_metrics,
    ConfusionMatrix,
    class_order,
    evaluate_attribution,
    evaluate_detection,
    kfold,
    true_class,
)
from .errors import InvalidInputError
from .lsh import MinHashParams
from .reports import DEFAULT_CONFIG, Label, TokenizerConfig, tokenize
from .store import StoredRecord, store_from_reports
from .synth import SynthCorpusSpec, iter_reports
from .vectorizer import FingerprintTable, build_corpus

log = logging.getLogger(__name__)

# Per-query re-ranking cap used by the bench; bounds matching cost the way
# LSH Forest bounds its candidate count.
BENCH_CANDIDATE_BUDGET = 256

SCALING_COLUMNS = ("n_reports", "tfidf_time", "lsh_match_time", "corpus_bytes", "f1_detection", "f1_attribution")


@dataclass
class ScalingRow:
    n_reports: int
    tfidf_time: float
    lsh_match_time: float
    corpus_bytes: int
    f1_detection: float
    f1_attribution: float
    n_queries: int = 0

    def as_csv_row(self) -> list[str]:
        return [
            str(self.n_reports),
            f"{self.tfidf_time:.6f}",
            f"{self.lsh_match_time:.6f}",
            str(self.corpus_bytes),
            f"{self.f1_detection:.6f}",
            f"{self.f1_attribution:.6f}",
        ]


@dataclass
class ScalingResult:
    rows: list[ScalingRow]
    metadata: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k in sorted(self.metadata):
            buf.write(f"# {k}={self.metadata[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCALING_COLUMNS)
        for r in self.rows:
            w.writerow(r.as_csv_row())
        return buf.getvalue()

    def ratio(self, column: str, hi: int, lo: int) -> float:
        by_n = {r.n_reports: r for r in self.rows}
        return getattr(by_n[hi], column) / getattr(by_n[lo], column)


def _best_of(fn: Callable[[], object], repeats: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeats):
        gc.collect()
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _fingerprint_all(texts: Sequence[str], config: TokenizerConfig, cfg: DetectorConfig) -> FingerprintTable:
    bags = [tokenize(t, config) for t in texts]
    corpus = build_corpus(bags)
    return FingerprintTable.from_bags(((str(i), b) for i, b in enumerate(bags)), corpus, cfg.idf_mode)


def _split_f1(train: list[StoredRecord], test: list[StoredRecord], cfg: DetectorConfig, params: MinHashParams,
              config: TokenizerConfig, timed_repeats: int = 0) -> tuple[float, list[str]]:
    store = store_from_reports(train, config, created_at="-")
    index = store.build_index(params)
    store.fingerprint_table(cfg.idf_mode)
    index._snapshot()
    queries = [(r.id, r.bag) for r in test]
    if timed_repeats:
        dt, verdicts = _best_of(lambda: classify_many(store, index, queries, cfg), timed_repeats)
    else:
        dt, verdicts = 0.0, classify_many(store, index, queries, cfg)
    return dt, [v.class_name for v in verdicts]


def scaling_bench(
    ladder: Sequence[int],
    base: SynthCorpusSpec = SynthCorpusSpec(),
    cfg: DetectorConfig = DetectorConfig(max_candidates=BENCH_CANDIDATE_BUDGET),
    params: MinHashParams = MinHashParams(),
    config: TokenizerConfig = DEFAULT_CONFIG,
    repeats: int = 3,
    seed: int = 0,
    on_row: Callable[[ScalingRow], None] | None = None,
) -> ScalingResult:
    """Time fingerprinting and LSH matching at every rung of ``ladder``.

    A rung that runs out of memory is logged and dropped; earlier rows are kept.
    """
    ladder = list(ladder)
    if not ladder or any(n < 20 for n in ladder):
        raise InvalidInputError("ladder sizes must be at least 20")
    if ladder != sorted(ladder) or len(set(ladder)) != len(ladder):
        raise InvalidInputError("ladder must be strictly ascending")
    meta = {
        "tool": f"behavsig {__version__}",
        "seed": seed,
        "repeats": repeats,
        "timing": f"wall clock, best of {repeats}, warm cache, single process",
        "holdout": "10% stratified",
        "lsh": f"N={params.n_hashes},b={params.n_bands},r={params.rows_per_band},seed={params.seed}",
        "idf_mode": cfg.idf_mode.value,
        "k": cfg.k,
        "max_candidates": cfg.max_candidates if cfg.max_candidates is not None else "unbounded",
        "python": platform.python_version(),
        "spec": base.to_json().replace("\n", "").replace("  ", ""),
    }
    rows: list[ScalingRow] = []
    for n in ladder:
        try:
            row = _rung(n, base, cfg, params, config, repeats, seed)
        except MemoryError:
            log.error("rung %d aborted: out of memory", n)
            meta[f"aborted_{n}"] = "out of memory"
            break
        rows.append(row)
        if on_row:
            on_row(row)
    return ScalingResult(rows, meta)


def _rung(n: int, base: SynthCorpusSpec, cfg: DetectorConfig, params: MinHashParams,
          config: TokenizerConfig, repeats: int, seed: int) -> ScalingRow:
    spec = base.with_total(n)
    reps = list(iter_reports(spec))
    texts = [r.text for r in reps]
    corpus_bytes = sum(len(t.encode("utf-8")) for t in texts)
    tfidf_time, _ = _best_of(lambda: _fingerprint_all(texts, config, cfg), repeats)

    records = [StoredRecord(r.name, r.label, tokenize(r.text, config), len(r.text.encode("utf-8"))) for r in reps]
    del texts, reps
    plan = kfold(((r.id, true_class(r)) for r in records), FoldPlan(10, seed))
    test_ids = set(plan.fold(0))
    train = [r for r in records if r.id not in test_ids]
    test = [r for r in records if r.id in test_ids]

    match_time, pred = _split_f1(train, test, cfg, params, config, timed_repeats=repeats)
    tp = sum(r.label.is_malware and p != BENIGN for r, p in zip(test, pred))
    fp = sum(not r.label.is_malware and p != BENIGN for r, p in zip(test, pred))
    fn = sum(r.label.is_malware and p == BENIGN for r, p in zip(test, pred))
    tn = len(test) - tp - fp - fn
    f1_det = binary_metrics(tp, fp, fn, tn).f1

    mal_train = [r for r in train if r.label.is_malware]
    mal_test = [r for r in test if r.label.is_malware]
    f1_att = 0.0
    if mal_train and mal_test:
        _, mpred = _split_f1(mal_train, mal_test, cfg, params, config)
        truth = [true_class(r) for r in mal_test]
        cm = ConfusionMatrix.from_pairs(truth, mpred, class_order(truth + mpred + [BENIGN]))
        f1_att = cm.weighted_metrics().f1
    row = ScalingRow(n, tfidf_time, match_time, corpus_bytes, f1_det, f1_att, len(test))
    log.info("rung %d: tfidf %.3fs match %.3fs (%d queries)", n, tfidf_time, match_time, len(test))
    return row


# dataset-size curve -------------------------------------------------------


@dataclass
class CurvePoint:
    n_reports: int
    detection: EvaluationResult
    attribution: EvaluationResult


def accuracy_curve(
    ladder: Sequence[int],
    base: SynthCorpusSpec = SynthCorpusSpec(),
    cfg: DetectorConfig = DetectorConfig(),
    params: MinHashParams = MinHashParams(),
    n_folds: int = 10,
    seed: int = 0,
    config: TokenizerConfig = DEFAULT_CONFIG,
) -> list[CurvePoint]:
    """Ten-fold detection and attribution metrics at each corpus size."""
    out = []
    for n in ladder:
        spec = base.with_total(n)
        records = [StoredRecord(r.name, r.label, tokenize(r.text, config), len(r.text.encode("utf-8")))
                   for r in iter_reports(spec)]
        det = evaluate_detection(records, FoldPlan(n_folds, seed), cfg, params=params)
        att = evaluate_attribution(records, FoldPlan(n_folds, seed), cfg, params=params)
        out.append(CurvePoint(n, det, att))
    return out


def curve_csv(points: Sequence[CurvePoint], header: Mapping[str, object] | None = None) -> str:
    buf = io.StringIO()
    meta = {"tool": f"behavsig {__version__}"}
    meta.update(header or {})
    for k in sorted(meta):
        buf.write(f"# {k}={meta[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_reports", "f1_detection", "precision_detection", "recall_detection", "f1_attribution"])
    for p in points:
        d, a = p.detection.aggregate, p.attribution.aggregate
        w.writerow([p.n_reports, f"{d.f1:.6f}", f"{d.precision:.6f}", f"{d.recall:.6f}", f"{a.f1:.6f}"])
    return buf.getvalue()
