"""Persistent analysis-report database.

The store keeps, per report, its label, byte size and token bag, and
maintains corpus statistics incrementally as reports are added.

On disk it is a JSON-lines file. Line 1 is a header (format version,
creation time, tokenizer config, record count) padded with spaces to a
fixed width so the record count can be patched in place; every further
line is one record. Updates append a line and patch the header; existing
records are never rewritten.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ConflictError,
    CorruptionError,
    IncompatibleFormatError,
    InvalidInputError,
    StaleStoreError,
)
from .lsh import LshIndex, MinHashParams, MinHashSignature, minhash_of_hashes, token_hash
from .reports import (
    DEFAULT_CONFIG,
    AnalysisReport,
    Label,
    LabelKind,
    ManifestEntry,
    TokenBag,
    TokenizerConfig,
    ingest_report,
    read_manifest,
)
from .vectorizer import CorpusStats, FingerprintTable, IdfMode, build_corpus

log = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1
_MIN_HEADER_WIDTH = 512


@dataclass(frozen=True)
class StoredRecord:
    id: str
    label: Label
    bag: TokenBag
    bytes: int

    @classmethod
    def from_report(cls, report: AnalysisReport) -> StoredRecord:
        return cls(report.id, report.label, report.bag, report.bytes)

    def to_json(self) -> str:
        return json.dumps(
            {
                "bag": self.bag.counts,
                "bytes": self.bytes,
                "family": self.label.family,
                "id": self.id,
                "label": self.label.kind.value,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, obj: dict) -> StoredRecord:
        return cls(
            id=obj["id"],
            label=Label(LabelKind(obj["label"]), obj["family"]),
            bag=TokenBag(obj["bag"]),
            bytes=int(obj["bytes"]),
        )


@dataclass(frozen=True)
class StoreManifest:
    format_version: int
    created_at: str
    tokenizer_config: TokenizerConfig
    record_count: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "created_at": self.created_at,
                "format_version": self.format_version,
                "record_count": self.record_count,
                "tokenizer_config": self.tokenizer_config.to_dict(),
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class IngestError:
    path: str
    line: int
    message: str


def default_timestamp() -> str:
    """``SOURCE_DATE_EPOCH`` when set (reproducible builds), else now; ISO-8601 UTC."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if epoch
        else datetime.now(tz=timezone.utc).replace(microsecond=0)
    )
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


class ReportStore:
    """Labelled token bags plus incrementally maintained corpus statistics.

    Iteration yields records sorted by id. The corpus vocabulary follows
    insertion order (which is also file order), so a loaded store has the
    same token ids as the one that was saved.
    """

    def __init__(
        self, tokenizer_config: TokenizerConfig = DEFAULT_CONFIG, created_at: str | None = None
    ) -> None:
        self.tokenizer_config = tokenizer_config
        self.created_at = created_at or default_timestamp()
        self._records: dict[str, StoredRecord] = {}
        self._token_ids: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.corpus = CorpusStats()
        self.dirty = False
        self.index: LshIndex | None = None
        self.ingest_errors: list[IngestError] = []
        self._sig_cache: dict[tuple[MinHashParams, str], MinHashSignature] = {}
        self._table_cache: dict[IdfMode, tuple[int, FingerprintTable]] = {}
        self._sorted_ids: list[str] | None = None

    # container protocol ---------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, rid: str) -> bool:
        return rid in self._records

    def __getitem__(self, rid: str) -> StoredRecord:
        return self._records[rid]

    def ids(self) -> list[str]:
        if self._sorted_ids is None:
            self._sorted_ids = sorted(self._records)
        return self._sorted_ids

    def __iter__(self) -> Iterator[StoredRecord]:
        return (self._records[i] for i in self.ids())

    def insertion_order(self) -> Iterator[StoredRecord]:
        return iter(self._records.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReportStore):
            return NotImplemented
        return (
            self.tokenizer_config == other.tokenizer_config
            and list(self._records.values()) == list(other._records.values())
            and self.corpus == other.corpus
            and self.dirty == other.dirty
        )

    # mutation ---------------------------------------------------------

    def add(self, record: StoredRecord | AnalysisReport, defer_stats: bool = False) -> StoredRecord:
        """Add one record. With ``defer_stats`` the corpus is left stale until :meth:`refresh`."""
        if isinstance(record, AnalysisReport):
            record = StoredRecord.from_report(record)
        if record.id in self._records:
            raise ConflictError(f"report id {record.id!r} already in store")
        self._records[record.id] = record
        self._sorted_ids = None
        if defer_stats or self.dirty:
            self.dirty = True
        else:
            self._count(record)
        return record

    def _count(self, record: StoredRecord) -> None:
        ids = self.corpus._add_bag(record.bag)
        counts = np.fromiter(record.bag.values(), dtype=np.float64, count=len(record.bag))
        self._token_ids[record.id] = (ids, counts)

    def refresh(self) -> None:
        """Rebuild corpus statistics from the records, in insertion order."""
        self.corpus = CorpusStats()
        self._token_ids.clear()
        self._table_cache.clear()
        for rec in self._records.values():
            self._count(rec)
        self.dirty = False

    # derived data -----------------------------------------------------

    def fingerprint_table(self, mode: IdfMode = IdfMode.LITERAL) -> FingerprintTable:
        """Fingerprints of every record under the current corpus stats, rows in id order."""
        if self.dirty:
            raise StaleStoreError("corpus statistics are stale; call refresh() first")
        mode = IdfMode(mode)
        cached = self._table_cache.get(mode)
        if cached is not None and cached[0] == self.corpus.version:
            return cached[1]
        ids = self.ids()
        table = FingerprintTable.from_id_arrays(
            ids,
            [self._token_ids[i][0] for i in ids],
            [self._token_ids[i][1] for i in ids],
            self.corpus,
            mode,
        )
        self._table_cache[mode] = (self.corpus.version, table)
        return table

    def signature(self, rid: str, params: MinHashParams) -> MinHashSignature:
        key = (params, rid)
        sig = self._sig_cache.get(key)
        if sig is None:
            bag = self._records[rid].bag
            base = np.fromiter((token_hash(t) for t in bag), dtype=np.uint64, count=len(bag))
            sig = self._sig_cache[key] = minhash_of_hashes(base, params)
        return sig

    def build_index(self, params: MinHashParams = MinHashParams()) -> LshIndex:
        """Create an LSH index over every record and attach it to the store."""
        index = LshIndex(params)
        for rid in self.ids():
            index.insert(rid, self.signature(rid, params))
        self.index = index
        return index

    # persistence ------------------------------------------------------

    def manifest(self) -> StoreManifest:
        return StoreManifest(STORE_FORMAT_VERSION, self.created_at, self.tokenizer_config, len(self))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(_pad_header(self.manifest().to_json()))
            for rec in self._records.values():
                fh.write(rec.to_json() + "\n")
        os.replace(tmp, path)

    def append_to(self, path: str | Path, record: StoredRecord) -> None:
        """Append ``record`` (already added) to a file written by :meth:`save`."""
        path = Path(path)
        with path.open("r+b") as fh:
            old_header = fh.readline()
            new_header = _pad_header(self.manifest().to_json(), width=len(old_header) - 1).encode()
            if len(new_header) != len(old_header):
                fh.close()
                self.save(path)
                return
            fh.seek(0, os.SEEK_END)
            fh.write((record.to_json() + "\n").encode("utf-8"))
            fh.flush()
            fh.seek(0)
            fh.write(new_header)

    @classmethod
    def load(cls, path: str | Path) -> ReportStore:
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            first = fh.readline()
            if not first.strip():
                raise CorruptionError(path, 1, "missing manifest line")
            try:
                head = json.loads(first)
                version = int(head["format_version"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptionError(path, 1, f"bad manifest line: {exc}") from None
            if version != STORE_FORMAT_VERSION:
                raise IncompatibleFormatError(path, version, STORE_FORMAT_VERSION)
            try:
                config = TokenizerConfig.from_dict(head["tokenizer_config"])
                expected = int(head["record_count"])
                store = cls(config, created_at=str(head["created_at"]))
            except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
                raise CorruptionError(path, 1, f"bad manifest line: {exc}") from None
            lineno = 1
            for lineno, line in enumerate(fh, 2):
                if not line.endswith("\n"):
                    raise CorruptionError(path, lineno, "truncated record")
                try:
                    store.add(StoredRecord.from_json(json.loads(line)), defer_stats=True)
                except (ValueError, KeyError, TypeError, InvalidInputError, ConflictError) as exc:
                    raise CorruptionError(path, lineno, f"bad record: {exc}") from None
            found = len(store)
            if found != expected:
                raise CorruptionError(
                    path, lineno + 1, f"manifest declares {expected} records but {found} present"
                )
        store.refresh()
        return store


def _pad_header(text: str, width: int | None = None) -> str:
    if width is None:
        width = max(_MIN_HEADER_WIDTH, ((len(text) + 64) // 256 + 1) * 256) - 1
    if len(text) > width:
        return text + "\n"
    return text.ljust(width) + "\n"


def _ingest(entry: ManifestEntry, config: TokenizerConfig) -> AnalysisReport | IngestError:
    try:
        return ingest_report(entry.path, entry.label, config)
    except OSError as exc:
        return IngestError(str(entry.path), entry.line, str(exc))


def ingest_entries(
    entries: Sequence[ManifestEntry], config: TokenizerConfig = DEFAULT_CONFIG, workers: int = 1
) -> list[AnalysisReport | IngestError]:
    """Ingest manifest entries, in parallel when ``workers > 1``; results keep input order."""
    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda e: _ingest(e, config), entries))
    return [_ingest(e, config) for e in entries]


def store_from_reports(
    reports: Iterable[AnalysisReport | StoredRecord],
    config: TokenizerConfig = DEFAULT_CONFIG,
    created_at: str | None = None,
) -> ReportStore:
    """Store over ``reports``, added in id order; duplicate ids raise ConflictError."""
    store = ReportStore(config, created_at)
    for rep in sorted(reports, key=lambda r: r.id):
        store.add(rep, defer_stats=True)
    store.refresh()
    return store


def init_store(
    mal_manifest: str | Path | None,
    ben_manifest: str | Path | None,
    config: TokenizerConfig = DEFAULT_CONFIG,
    workers: int = 1,
    created_at: str | None = None,
) -> ReportStore:
    """Initial bulk setup from a malware manifest and a benign manifest.

    Either manifest may be None. Unreadable files and label mismatches are
    collected in ``store.ingest_errors``; the store is built from whatever
    ingested. Raises InvalidInputError when nothing could be ingested.
    """
    entries: list[ManifestEntry] = []
    errors: list[IngestError] = []
    for manifest, kind in ((mal_manifest, LabelKind.MALWARE), (ben_manifest, LabelKind.BENIGN)):
        if manifest is None:
            continue
        for e in read_manifest(manifest, default_kind=kind):
            if e.label.kind is not kind:
                errors.append(
                    IngestError(str(e.path), e.line, f"{e.label.kind.value} entry in {kind.value.lower()} manifest")
                )
            else:
                entries.append(e)

    results = ingest_entries(entries, config, workers)
    good: dict[str, AnalysisReport] = {}
    for entry, res in zip(entries, results):
        if isinstance(res, IngestError):
            errors.append(res)
        elif res.id in good:
            errors.append(IngestError(str(entry.path), entry.line, f"duplicate report id {res.id}"))
        else:
            good[res.id] = res
    for err in errors:
        log.warning("skipped %s (line %d): %s", err.path, err.line, err.message)
    if not good:
        raise InvalidInputError("no report could be ingested")
    store = store_from_reports(good.values(), config, created_at)
    store.ingest_errors = errors
    return store


def update_store(store: ReportStore, report: AnalysisReport | StoredRecord) -> ReportStore:
    """Add one report; df, n_docs and any attached index are updated in place."""
    if report.id in store:
        raise ConflictError(f"report id {report.id!r} already in store")
    if store.dirty:
        store.refresh()
    rec = store.add(report)
    if store.index is not None:
        store.index.insert(rec.id, store.signature(rec.id, store.index.params))
    return store


def rebuild_corpus(store: ReportStore) -> CorpusStats:
    """From-scratch corpus statistics over the store's records (insertion order)."""
    return build_corpus([r.bag for r in store.insertion_order()])
