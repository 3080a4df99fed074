"""Behavioral fingerprinting of plain-text dynamic-analysis reports.

Reports become tf-idf fingerprints relative to a labelled corpus. A minhash
LSH index proposes neighbours, and exact cosine picks the nearest one to
label a new report benign or malicious with a malware family.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .detector import Decision, DetectorConfig, Verdict, Vote, classify, classify_batch, classify_many
from .errors import (
    BehavsigError,
    ConflictError,
    CorruptionError,
    IncompatibleFormatError,
    InvalidInputError,
    ParamsMismatchError,
    StaleStoreError,
)
from .lsh import LshIndex, MinHashParams, MinHashSignature, minhash
from .reports import AnalysisReport, Label, LabelKind, TokenBag, TokenizerConfig, ingest_report, tokenize
from .store import ReportStore, StoredRecord, init_store, update_store
from .vectorizer import CorpusStats, Fingerprint, IdfMode, build_corpus, cosine, fingerprint

__all__ = [
    "AnalysisReport",
    "BehavsigError",
    "ConflictError",
    "CorpusStats",
    "CorruptionError",
    "Decision",
    "DetectorConfig",
    "Fingerprint",
    "IdfMode",
    "IncompatibleFormatError",
    "InvalidInputError",
    "Label",
    "LabelKind",
    "LshIndex",
    "MinHashParams",
    "MinHashSignature",
    "ParamsMismatchError",
    "ReportStore",
    "StaleStoreError",
    "StoredRecord",
    "TokenBag",
    "TokenizerConfig",
    "Verdict",
    "Vote",
    "build_corpus",
    "classify",
    "classify_batch",
    "classify_many",
    "cosine",
    "fingerprint",
    "ingest_report",
    "init_store",
    "minhash",
    "tokenize",
    "update_store",
]
