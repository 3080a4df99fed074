"""K-fold evaluation of detection and family attribution, size statistics.

Detection treats Malicious as the positive class and aggregates folds by
summing confusion counts before computing precision/recall/F1 (micro).
Attribution computes one-vs-rest precision and recall per true family and
averages them weighted by support; its F1 is the harmonic mean of those
weighted P and R.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import random
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .detector import DetectorConfig, classify_many
from .errors import InvalidInputError
from .lsh import MinHashParams, MinHashSignature
from .reports import DEFAULT_CONFIG, LabelKind, TokenizerConfig, read_manifest
from .store import IngestError, ReportStore, StoredRecord, ingest_entries, store_from_reports

log = logging.getLogger(__name__)

BENIGN = "Benign"

# (training records, test records) -> predicted class names, one per test record
Predictor = Callable[[Sequence[StoredRecord], Sequence[StoredRecord]], list[str]]


@dataclass
class FoldPlan:
    n_folds: int = 10
    seed: int = 0
    stratified: bool = True
    assignments: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def fold(self, i: int) -> list[str]:
        return sorted(rid for rid, f in self.assignments.items() if f == i)

    def sizes(self) -> list[int]:
        out = [0] * self.n_folds
        for f in self.assignments.values():
            out[f] += 1
        return out


def kfold(items: Iterable[tuple[str, str]], plan: FoldPlan | None = None) -> FoldPlan:
    """Assign ``(id, stratum)`` pairs to folds.

    Ids are shuffled with ``plan.seed`` and dealt round-robin. When
    stratified, each stratum is dealt in turn and the dealer position carries
    over between strata, so both per-stratum and overall fold sizes differ by
    at most one. A stratum smaller than ``n_folds`` downgrades the plan to
    unstratified.
    """
    plan = plan or FoldPlan()
    if plan.n_folds < 2:
        raise InvalidInputError("need at least two folds")
    items = sorted(items)
    if len({i for i, _ in items}) != len(items):
        raise InvalidInputError("duplicate ids in fold input")
    strata: dict[str, list[str]] = defaultdict(list)
    for rid, key in items:
        strata[key].append(rid)

    stratified = plan.stratified
    warnings = list(plan.warnings)
    if stratified:
        small = sorted(k for k, v in strata.items() if len(v) < plan.n_folds)
        if small:
            msg = f"strata smaller than {plan.n_folds} folds ({', '.join(small)}); using unstratified folds"
            log.warning(msg)
            warnings.append(msg)
            stratified = False
    groups = [strata[k] for k in sorted(strata)] if stratified else [[rid for rid, _ in items]]

    rng = random.Random(plan.seed)
    assignments: dict[str, int] = {}
    pos = 0
    for group in groups:
        group = list(group)
        rng.shuffle(group)
        for rid in group:
            assignments[rid] = pos % plan.n_folds
            pos += 1
    return FoldPlan(plan.n_folds, plan.seed, stratified, assignments, warnings)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    wall_time: float = 0.0
    average: str = "binary"
    undefined: tuple[str, ...] = ()
    fold: int | None = None
    excluded: bool = False

    @property
    def accuracy(self) -> float:
        total = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / total if total else 0.0

    def row(self) -> dict:
        return {
            "fold": "all" if self.fold is None else self.fold,
            "average": self.average,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": f"{self.precision:.6f}",
            "recall": f"{self.recall:.6f}",
            "f1": f"{self.f1:.6f}",
            "undefined": ";".join(self.undefined),
            "excluded": int(self.excluded),
        }


def harmonic_f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def binary_metrics(tp: int, fp: int, fn: int, tn: int, wall_time: float = 0.0) -> MetricsReport:
    undefined = []
    if tp + fp > 0:
        p = tp / (tp + fp)
    else:
        p = 0.0
        undefined.append("precision")
    if tp + fn > 0:
        r = tp / (tp + fn)
    else:
        r = 0.0
        undefined.append("recall")
    if p + r == 0:
        undefined.append("f1")
    return MetricsReport(tp, fp, fn, tn, p, r, harmonic_f1(p, r), wall_time, "binary", tuple(undefined))


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    classes: list[str]
    counts: np.ndarray

    @classmethod
    def from_pairs(cls, truth: Sequence[str], pred: Sequence[str], classes: Sequence[str] | None = None) -> ConfusionMatrix:
        if classes is None:
            classes = class_order(list(truth) + list(pred))
        classes = list(classes)
        pos = {c: i for i, c in enumerate(classes)}
        m = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t, p in zip(truth, pred):
            m[pos[t], pos[p]] += 1
        return cls(classes, m)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        classes = class_order(self.classes + other.classes)
        out = ConfusionMatrix(classes, np.zeros((len(classes),) * 2, dtype=np.int64))
        for cm in (self, other):
            idx = [classes.index(c) for c in cm.classes]
            out.counts[np.ix_(idx, idx)] += cm.counts
        return out

    @property
    def log10_view(self) -> np.ndarray:
        return np.log10(1.0 + self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def per_class(self) -> list[tuple[str, float, float, int, bool]]:
        """(class, precision, recall, support, precision_defined) one-vs-rest."""
        out = []
        col = self.counts.sum(axis=0)
        row = self.counts.sum(axis=1)
        for i, c in enumerate(self.classes):
            tp = int(self.counts[i, i])
            p = tp / col[i] if col[i] else 0.0
            r = tp / row[i] if row[i] else 0.0
            out.append((c, p, r, int(row[i]), bool(col[i])))
        return out

    def weighted_metrics(self, wall_time: float = 0.0) -> MetricsReport:
        per = self.per_class()
        total = sum(s for *_, s, _ in per)
        undefined = sorted(f"precision:{c}" for c, _, _, s, ok in per if s and not ok)
        if total:
            p = sum(pc * s for _, pc, _, s, _ in per) / total
            r = sum(rc * s for _, _, rc, s, _ in per) / total
        else:
            p = r = 0.0
        trace = int(np.trace(self.counts))
        wrong = self.total - trace
        tn = sum(self.total - int(self.counts[i].sum()) - int(self.counts[:, i].sum()) + int(self.counts[i, i])
                 for i in range(len(self.classes)))
        return MetricsReport(trace, wrong, wrong, tn, p, r, harmonic_f1(p, r), wall_time, "weighted", tuple(undefined))

    def to_csv(self, header: Mapping[str, object] | None = None) -> str:
        buf = io.StringIO()
        _comment_header(buf, header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view", "true"] + self.classes)
        for i, c in enumerate(self.classes):
            w.writerow(["count", c] + [int(x) for x in self.counts[i]])
        logv = self.log10_view
        for i, c in enumerate(self.classes):
            w.writerow(["log10", c] + [f"{x:.6f}" for x in logv[i]])
        return buf.getvalue()


def class_order(names: Iterable[str]) -> list[str]:
    """Families sorted by name, Benign last."""
    uniq = set(names)
    return sorted(uniq - {BENIGN}) + ([BENIGN] if BENIGN in uniq else [])


def _comment_header(buf: io.StringIO, header: Mapping[str, object] | None) -> None:
    meta = {"tool": f"behavsig {__version__}"}
    meta.update(header or {})
    for k in sorted(meta):
        buf.write(f"# {k}={meta[k]}\n")


# predictors ---------------------------------------------------------------


class NearestNeighborPredictor:
    """Builds a store and LSH index over the training split and classifies the test split."""

    def __init__(
        self,
        cfg: DetectorConfig = DetectorConfig(),
        params: MinHashParams = MinHashParams(),
        config: TokenizerConfig = DEFAULT_CONFIG,
    ) -> None:
        self.cfg = cfg
        self.params = params
        self.config = config
        self._sigs: dict[tuple[MinHashParams, str], MinHashSignature] = {}

    def __call__(self, train: Sequence[StoredRecord], test: Sequence[StoredRecord]) -> list[str]:
        store = store_from_reports(train, self.config, created_at="-")
        store._sig_cache = self._sigs
        index = store.build_index(self.params)
        verdicts = classify_many(store, index, [(r.id, r.bag) for r in test], self.cfg)
        return [v.class_name for v in verdicts]


def oracle_predictor(train: Sequence[StoredRecord], test: Sequence[StoredRecord]) -> list[str]:
    """Returns the true class of every test record."""
    return [true_class(r) for r in test]


def constant_predictor(name: str) -> Predictor:
    return lambda train, test: [name] * len(test)


def true_class(rec: StoredRecord) -> str:
    return rec.label.family if rec.label.is_malware else BENIGN


# evaluation -------------------------------------------------------------


@dataclass
class EvaluationResult:
    mode: str
    folds: list[MetricsReport]
    aggregate: MetricsReport
    confusion: ConfusionMatrix
    plan: FoldPlan
    warnings: list[str] = field(default_factory=list)

    def metrics_csv(self, header: Mapping[str, object] | None = None) -> str:
        buf = io.StringIO()
        meta = {
            "mode": self.mode,
            "n_folds": self.plan.n_folds,
            "seed": self.plan.seed,
            "stratified": self.plan.stratified,
            "aggregation": "micro (summed counts)" if self.mode == "detection" else "support-weighted one-vs-rest",
        }
        meta.update(header or {})
        _comment_header(buf, meta)
        rows = [m.row() for m in self.folds] + [self.aggregate.row()]
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def _run_folds(records: Sequence[StoredRecord], plan: FoldPlan, predictor: Predictor):
    by_id = {r.id: r for r in records}
    for f in range(plan.n_folds):
        test_ids = set(plan.fold(f))
        test = [by_id[i] for i in sorted(test_ids)]
        train = [r for r in records if r.id not in test_ids]
        t0 = time.perf_counter()
        pred = predictor(train, test) if test else []
        yield f, train, test, pred, time.perf_counter() - t0


def _plan_for(records: Sequence[StoredRecord], plan: FoldPlan | None) -> FoldPlan:
    plan = plan or FoldPlan()
    if plan.assignments:
        return plan
    return kfold(((r.id, true_class(r)) for r in records), plan)


def evaluate_detection(
    records: Sequence[StoredRecord],
    plan: FoldPlan | None = None,
    cfg: DetectorConfig = DetectorConfig(),
    predictor: Predictor | None = None,
    params: MinHashParams = MinHashParams(),
) -> EvaluationResult:
    """Ten-fold (by default) benign/malicious evaluation on a mixed corpus."""
    kinds = {r.label.is_malware for r in records}
    if kinds != {True, False}:
        raise InvalidInputError("detection evaluation needs both benign and malware records")
    plan = _plan_for(records, plan)
    predictor = predictor or NearestNeighborPredictor(cfg, params)
    warnings = list(plan.warnings)
    folds: list[MetricsReport] = []
    counts = np.zeros(4, dtype=np.int64)
    truth_all: list[str] = []
    pred_all: list[str] = []
    for f, train, test, pred, dt in _run_folds(records, plan, predictor):
        tp = fp = fn = tn = 0
        for rec, p in zip(test, pred):
            t_pos, p_pos = rec.label.is_malware, p != BENIGN
            tp += t_pos and p_pos
            fp += (not t_pos) and p_pos
            fn += t_pos and not p_pos
            tn += not t_pos and not p_pos
        m = binary_metrics(tp, fp, fn, tn, dt)
        m.fold = f
        if len({r.label.is_malware for r in train}) < 2:
            msg = f"fold {f}: single-class training set, excluded from aggregate"
            log.warning(msg)
            warnings.append(msg)
            m.excluded = True
        else:
            counts += (tp, fp, fn, tn)
            truth_all += [BENIGN if not r.label.is_malware else "Malicious" for r in test]
            pred_all += [BENIGN if p == BENIGN else "Malicious" for p in pred]
        folds.append(m)
    agg = binary_metrics(*(int(c) for c in counts), sum(m.wall_time for m in folds))
    cm = ConfusionMatrix.from_pairs(truth_all, pred_all, ["Malicious", BENIGN])
    return EvaluationResult("detection", folds, agg, cm, plan, warnings)


def evaluate_attribution(
    records: Sequence[StoredRecord],
    plan: FoldPlan | None = None,
    cfg: DetectorConfig = DetectorConfig(),
    predictor: Predictor | None = None,
    params: MinHashParams = MinHashParams(),
) -> EvaluationResult:
    """Family attribution on malware-only records (non-malware records are dropped)."""
    malware = [r for r in records if r.label.is_malware]
    warnings: list[str] = []
    if len(malware) != len(records):
        warnings.append(f"dropped {len(records) - len(malware)} non-malware records")
    families = {r.label.family for r in malware}
    if len(families) < 2:
        raise InvalidInputError("attribution evaluation needs at least two families")
    plan = _plan_for(malware, plan)
    warnings += plan.warnings
    predictor = predictor or NearestNeighborPredictor(cfg, params)
    classes = class_order(list(families) + [BENIGN])
    folds: list[MetricsReport] = []
    total = ConfusionMatrix(classes, np.zeros((len(classes),) * 2, dtype=np.int64))
    for f, train, test, pred, dt in _run_folds(malware, plan, predictor):
        seen = {r.label.family for r in train}
        missing = sorted({r.label.family for r in test} - seen)
        if missing:
            msg = f"fold {f}: families absent from training: {', '.join(missing)}"
            log.warning(msg)
            warnings.append(msg)
        cm = ConfusionMatrix.from_pairs([true_class(r) for r in test], pred, classes)
        m = cm.weighted_metrics(dt)
        m.fold = f
        folds.append(m)
        total = total + cm
    agg = total.weighted_metrics(sum(m.wall_time for m in folds))
    return EvaluationResult("attribution", folds, agg, total, plan, warnings)


# loading -----------------------------------------------------------------


def load_records(
    manifest: str | Path, config: TokenizerConfig = DEFAULT_CONFIG, workers: int = 1
) -> tuple[list[StoredRecord], list[IngestError]]:
    """Ingest every entry of a manifest; unreadable files are returned as errors."""
    entries = read_manifest(manifest)
    results = ingest_entries(entries, config, workers)
    good: dict[str, StoredRecord] = {}
    errors = []
    for e, res in zip(entries, results):
        if isinstance(res, IngestError):
            errors.append(res)
        elif res.id in good:
            errors.append(IngestError(str(e.path), e.line, f"duplicate report id {res.id}"))
        else:
            good[res.id] = StoredRecord.from_report(res)
    return [good[k] for k in sorted(good)], errors


# report sizes -------------------------------------------------------------


@dataclass
class SizeHistogram:
    label: str
    scale: str
    edges: list[float]
    counts: list[int]


@dataclass
class SizeStats:
    histograms: list[SizeHistogram]
    summary: dict[str, dict[str, float]]

    def to_csv(self, header: Mapping[str, object] | None = None) -> str:
        buf = io.StringIO()
        _comment_header(buf, header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "label", "measure", "bin_lo", "bin_hi", "value"])
        for lab in sorted(self.summary):
            for k in ("count", "mean", "median", "max"):
                w.writerow(["summary", lab, k, "", "", _fmt(self.summary[lab][k])])
        for h in self.histograms:
            for i, c in enumerate(h.counts):
                w.writerow(["histogram", h.label, h.scale, _fmt(h.edges[i]), _fmt(h.edges[i + 1]), c])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.6f}"


ZERO_BYTES_LOG = -1.0


def size_stats(
    source: ReportStore | Iterable[StoredRecord], bins: int = 20, labels: Sequence[str] = (LabelKind.BENIGN.value, LabelKind.MALWARE.value)
) -> SizeStats:
    """Byte-size and log10(byte-size) histograms per label kind.

    Zero-byte reports land at log10 = -1. A label with no reports yields an
    empty histogram.
    """
    records = list(source)
    if not records:
        raise InvalidInputError("size statistics need at least one record")
    sizes: dict[str, list[int]] = {lab: [] for lab in labels}
    for r in records:
        sizes.setdefault(r.label.kind.value, []).append(r.bytes)
    hists, summary = [], {}
    for lab in sorted(sizes):
        vals = sizes[lab]
        if not vals:
            hists.append(SizeHistogram(lab, "bytes", [], []))
            hists.append(SizeHistogram(lab, "log10", [], []))
            summary[lab] = {"count": 0, "mean": 0.0, "median": 0.0, "max": 0}
            continue
        arr = np.asarray(vals, dtype=np.float64)
        logs = np.where(arr > 0, np.log10(np.maximum(arr, 1.0)), ZERO_BYTES_LOG)
        for scale, data in (("bytes", arr), ("log10", logs)):
            c, e = np.histogram(data, bins=bins)
            hists.append(SizeHistogram(lab, scale, e.tolist(), c.tolist()))
        summary[lab] = {
            "count": len(vals),
            "mean": float(np.mean(arr)),
            "median": float(statistics.median(vals)),
            "max": int(max(vals)),
        }
    return SizeStats(hists, summary)


def log10_size(nbytes: int) -> float:
    return math.log10(nbytes) if nbytes > 0 else ZERO_BYTES_LOG
