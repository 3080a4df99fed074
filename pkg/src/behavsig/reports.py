"""Analysis reports, labels and the bag-of-words tokenizer.

Sandbox reports are treated as opaque text: a report is split on a
configurable delimiter set and reduced to token counts.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import InvalidInputError

log = logging.getLogger(__name__)

ASCII_WHITESPACE = " \t\n\r\x0b\x0c"
DEFAULT_DELIMITERS = frozenset(ASCII_WHITESPACE + "{}[](),:\"'")


class LabelKind(str, enum.Enum):
    BENIGN = "Benign"
    MALWARE = "Malware"
    UNKNOWN = "Unknown"


@dataclass(frozen=True, order=True)
class Label:
    """Ground-truth label of a report; ``family`` is set exactly for malware."""

    kind: LabelKind
    family: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.kind, LabelKind):
            object.__setattr__(self, "kind", LabelKind(self.kind))
        if self.kind is LabelKind.MALWARE:
            if not self.family:
                raise InvalidInputError("malware label requires a non-empty family")
        elif self.family is not None:
            raise InvalidInputError(f"{self.kind.value} label cannot carry a family")

    @classmethod
    def benign(cls) -> Label:
        return cls(LabelKind.BENIGN)

    @classmethod
    def malware(cls, family: str) -> Label:
        return cls(LabelKind.MALWARE, family)

    @classmethod
    def unknown(cls) -> Label:
        return cls(LabelKind.UNKNOWN)

    @property
    def is_malware(self) -> bool:
        return self.kind is LabelKind.MALWARE

    @property
    def class_name(self) -> str:
        """Family name for malware, otherwise the kind name (used as a class key)."""
        return self.family if self.family is not None else self.kind.value

    @classmethod
    def parse(cls, kind: str, family: str | None = None) -> Label:
        if family in (None, "", "-"):
            family = None
        try:
            k = LabelKind(kind.strip().capitalize())
        except ValueError:
            raise InvalidInputError(f"unknown label kind {kind!r}") from None
        return cls(k, family.strip() if family else None)


@dataclass(frozen=True)
class TokenizerConfig:
    delimiters: frozenset[str] = DEFAULT_DELIMITERS
    lowercase: bool = True
    min_token_len: int = 1
    max_token_len: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "delimiters", frozenset(self.delimiters))
        if not self.delimiters:
            raise InvalidInputError("delimiter set must not be empty")
        if any(len(d) != 1 for d in self.delimiters):
            raise InvalidInputError("delimiters must be single characters")
        if self.min_token_len < 0 or self.max_token_len < 1:
            raise InvalidInputError("token length bounds out of range")
        if self.min_token_len > self.max_token_len:
            raise InvalidInputError("min_token_len exceeds max_token_len")

    @cached_property
    def _token_re(self) -> re.Pattern[str]:
        cls = "".join(re.escape(c) for c in sorted(self.delimiters))
        return re.compile(f"[^{cls}]+")

    def to_dict(self) -> dict:
        return {
            "delimiters": "".join(sorted(self.delimiters)),
            "lowercase": self.lowercase,
            "max_token_len": self.max_token_len,
            "min_token_len": self.min_token_len,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TokenizerConfig:
        return cls(
            delimiters=frozenset(d["delimiters"]),
            lowercase=bool(d["lowercase"]),
            min_token_len=int(d["min_token_len"]),
            max_token_len=int(d["max_token_len"]),
        )


DEFAULT_CONFIG = TokenizerConfig()


class TokenBag(Mapping[str, int]):
    """Immutable multiset of tokens.

    Tokens are kept in sorted order so that anything derived from iteration
    order (vocabulary ids in particular) does not depend on how the bag was
    produced.
    """

    __slots__ = ("_counts", "total")

    def __init__(self, counts: Mapping[str, int] | Iterable[tuple[str, int]] = ()) -> None:
        items = counts.items() if isinstance(counts, Mapping) else counts
        clean: dict[str, int] = {}
        for tok, c in sorted(items):
            c = int(c)
            if c < 1:
                raise InvalidInputError(f"token count must be positive, got {tok!r}: {c}")
            clean[tok] = c
        self._counts = clean
        self.total = sum(clean.values())

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> TokenBag:
        return cls(Counter(tokens))

    @property
    def counts(self) -> dict[str, int]:
        return dict(self._counts)

    def __getitem__(self, token: str) -> int:
        return self._counts[token]

    def __iter__(self) -> Iterator[str]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, TokenBag):
            return self._counts == other._counts
        if isinstance(other, Mapping):
            return self._counts == dict(other)
        return NotImplemented

    def __hash__(self) -> int:
        return hash(tuple(self._counts.items()))

    def __repr__(self) -> str:
        return f"TokenBag({self._counts!r})"

    def __add__(self, other: TokenBag) -> TokenBag:
        merged = Counter(self._counts)
        merged.update(other._counts)
        return TokenBag(merged)

    def tokens(self) -> list[str]:
        """Flat token list, each token repeated by its count."""
        return [t for t, c in self._counts.items() for _ in range(c)]


def tokenize(raw: str, config: TokenizerConfig = DEFAULT_CONFIG) -> TokenBag:
    """Split ``raw`` into maximal delimiter-free runs and count them."""
    if config.lowercase:
        raw = raw.lower()
    lo, hi = config.min_token_len, config.max_token_len
    toks = config._token_re.findall(raw)
    if lo > 1 or hi < max((len(t) for t in toks), default=0):
        toks = [t for t in toks if lo <= len(t) <= hi]
    return TokenBag.from_tokens(toks)


@dataclass(frozen=True)
class AnalysisReport:
    id: str
    label: Label
    raw: str
    bytes: int
    bag: TokenBag = field(repr=False)
    decode_warnings: int = 0


def report_id(data: bytes, stem: str) -> str:
    """First 16 hex chars of the SHA-256 of the file content, then the file stem."""
    return f"{hashlib.sha256(data).hexdigest()[:16]}-{stem}"


def decode_lossy(data: bytes) -> tuple[str, int]:
    """Decode UTF-8, substituting U+FFFD for invalid sequences.

    Returns the text and the number of substitutions made.
    """
    try:
        return data.decode("utf-8"), 0
    except UnicodeDecodeError:
        text = data.decode("utf-8", errors="replace")
        n = text.count("\ufffd") - data.count(b"\xef\xbf\xbd")
        return text, n


def ingest_report(
    path: str | Path, label: Label, config: TokenizerConfig = DEFAULT_CONFIG
) -> AnalysisReport:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read report {path}: {exc.strerror}", str(path)) from exc
    raw, warnings = decode_lossy(data)
    if warnings:
        log.warning("%s: %d undecodable byte sequence(s) replaced", path, warnings)
    return AnalysisReport(
        id=report_id(data, path.stem),
        label=label,
        raw=raw,
        bytes=len(data),
        bag=tokenize(raw, config),
        decode_warnings=warnings,
    )


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: Label
    line: int


def read_manifest(path: str | Path, default_kind: LabelKind | None = None) -> list[ManifestEntry]:
    """Parse a ``<path>\\t<Benign|Malware>\\t<family-or-->`` manifest.

    Relative report paths resolve against the manifest's directory. Blank
    lines and ``#`` comments are skipped. When ``default_kind`` is Benign or
    Unknown, a line may consist of the path alone.
    """
    path = Path(path)
    base = path.parent
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 1 and default_kind in (LabelKind.BENIGN, LabelKind.UNKNOWN):
                label = Label.benign() if default_kind is LabelKind.BENIGN else Label.unknown()
            elif len(parts) in (2, 3):
                try:
                    label = Label.parse(parts[1], parts[2] if len(parts) == 3 else None)
                except InvalidInputError as exc:
                    raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
            else:
                raise InvalidInputError(f"{path}:{lineno}: expected 3 tab-separated fields")
            p = Path(parts[0])
            entries.append(ManifestEntry(p if p.is_absolute() else base / p, label, lineno))
    return entries


def write_manifest(path: str | Path, entries: Iterable[tuple[str | Path, Label]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p, label in entries:
            fh.write(f"{p}\t{label.kind.value}\t{label.family or '-'}\n")
