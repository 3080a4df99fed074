"""Synthetic labelled report corpora for evaluation and benchmarking.

Every malware family owns a private token pool. A malware report draws
``(1 - noise_rate)`` of its tokens uniformly from its family pool plus the
shared pool and the rest uniformly from a background pool. Benign reports
draw from the shared and background pools only. The background pool is
disjoint from the family pools, so with ``noise_rate = 0`` and no shared
pool reports of different families (and benign reports) have disjoint
vocabularies.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidInputError
from .reports import Label, write_manifest

# Family sizes of the reference malware dataset, largest first.
REFERENCE_FAMILIES = (
    ("FakeInstaller", 866),
    ("DroidKungFu", 611),
    ("Opfake", 566),
    ("Plankton", 515),
    ("GinMaster", 314),
    ("BaseBridge", 295),
    ("Iconosys", 127),
    ("FakeDoc", 120),
)
REFERENCE_BENIGN = 5225

_TOKENS_PER_LINE = 8


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_families: int = 8
    samples_per_family: tuple[int, ...] = (87, 61, 57, 52, 31, 30, 13, 12)
    family_vocab_size: int = 40
    shared_vocab_size: int = 20
    noise_rate: float = 0.3
    tokens_per_report: int = 300
    benign_count: int = 520
    seed: int = 0
    global_vocab_size: int = 150
    family_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples_per_family", tuple(int(x) for x in self.samples_per_family))
        object.__setattr__(self, "family_names", tuple(self.family_names))
        if self.n_families < 1:
            raise InvalidInputError("n_families must be positive")
        if len(self.samples_per_family) != self.n_families:
            raise InvalidInputError("samples_per_family needs one entry per family")
        if any(c < 1 for c in self.samples_per_family):
            raise InvalidInputError("every family needs at least one sample")
        if self.family_names and len(self.family_names) != self.n_families:
            raise InvalidInputError("family_names needs one entry per family")
        if len(set(self.names)) != self.n_families:
            raise InvalidInputError("family names must be distinct")
        if self.family_vocab_size < 1:
            raise InvalidInputError("family_vocab_size must be positive")
        if self.shared_vocab_size < 0 or self.global_vocab_size < 0 or self.benign_count < 0:
            raise InvalidInputError("pool sizes and benign_count must be nonnegative")
        if not 0.0 <= self.noise_rate < 1.0:
            raise InvalidInputError("noise_rate must lie in [0, 1)")
        if self.tokens_per_report < 1:
            raise InvalidInputError("tokens_per_report must be positive")
        if self.noise_rate > 0 and self.global_vocab_size == 0:
            raise InvalidInputError("noise requires a non-empty background pool")
        if self.benign_count and self.shared_vocab_size + self.global_vocab_size == 0:
            raise InvalidInputError("benign reports need a shared or background pool")

    @property
    def names(self) -> tuple[str, ...]:
        if self.family_names:
            return self.family_names
        if self.n_families <= len(REFERENCE_FAMILIES):
            return tuple(n for n, _ in REFERENCE_FAMILIES[: self.n_families])
        return tuple(f"Family{i:03d}" for i in range(self.n_families))

    @property
    def total(self) -> int:
        return sum(self.samples_per_family) + self.benign_count

    def to_json(self) -> str:
        d = asdict(self)
        d["samples_per_family"] = list(self.samples_per_family)
        d["family_names"] = list(self.family_names)
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> SynthCorpusSpec:
        d = json.loads(text)
        d["samples_per_family"] = tuple(d["samples_per_family"])
        d["family_names"] = tuple(d.get("family_names", ()))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> SynthCorpusSpec:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def with_total(self, total: int) -> SynthCorpusSpec:
        """Same shape (family proportions and benign share) rescaled to ``total`` reports."""
        weights = list(self.samples_per_family) + ([self.benign_count] if self.benign_count else [])
        counts = apportion(weights, total)
        fam = tuple(max(1, c) for c in counts[: self.n_families])
        benign = counts[self.n_families] if self.benign_count else 0
        return _replace(self, samples_per_family=fam, benign_count=benign)

    def malware_only(self) -> SynthCorpusSpec:
        return _replace(self, benign_count=0)


def _replace(spec: SynthCorpusSpec, **changes) -> SynthCorpusSpec:
    d = asdict(spec)
    d.update(changes)
    return SynthCorpusSpec(**d)


def apportion(weights: list[int] | list[float], total: int) -> list[int]:
    """Largest-remainder rounding of ``weights`` scaled to sum to ``total``."""
    s = float(sum(weights))
    raw = [w * total / s for w in weights]
    out = [math.floor(x) for x in raw]
    short = total - sum(out)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[:short]:
        out[i] += 1
    return out


def reference_spec(
    scale: float = 0.1, benign_count: int | None = None, **overrides
) -> SynthCorpusSpec:
    """Spec whose family sizes follow the reference dataset scaled by ``scale`` (half rounds up)."""
    counts = tuple(max(1, math.floor(c * scale + 0.5)) for _, c in REFERENCE_FAMILIES)
    if benign_count is None:
        benign_count = math.floor(REFERENCE_BENIGN * scale + 0.5)
    return SynthCorpusSpec(
        n_families=len(counts), samples_per_family=counts, benign_count=benign_count, **overrides
    )


@dataclass(frozen=True)
class SynthReport:
    name: str
    label: Label
    text: str


class _Pools:
    def __init__(self, spec: SynthCorpusSpec) -> None:
        self.family = [
            [f"f{f:02d}x{j:04d}" for j in range(spec.family_vocab_size)] for f in range(spec.n_families)
        ]
        self.shared = [f"sys{j:04d}" for j in range(spec.shared_vocab_size)]
        self.background = [f"evt{j:05d}" for j in range(spec.global_vocab_size)]


def _render(tokens: list[str]) -> str:
    lines = []
    for i in range(0, len(tokens), _TOKENS_PER_LINE):
        chunk = tokens[i : i + _TOKENS_PER_LINE]
        lines.append("{" + chunk[0] + ": [" + ", ".join(chunk[1:]) + "]}")
    return "\n".join(lines) + "\n"


def _draw(rng: np.random.Generator, pool: list[str], n: int) -> list[str]:
    if n == 0:
        return []
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def iter_reports(spec: SynthCorpusSpec) -> Iterator[SynthReport]:
    """Generate reports deterministically from ``spec.seed``: families in order, then benign."""
    rng = np.random.default_rng(spec.seed)
    pools = _Pools(spec)
    n_noise = round(spec.noise_rate * spec.tokens_per_report)
    n_main = spec.tokens_per_report - n_noise
    for f, (name, count) in enumerate(zip(spec.names, spec.samples_per_family)):
        main_pool = pools.family[f] + pools.shared
        for i in range(count):
            toks = _draw(rng, main_pool, n_main) + _draw(rng, pools.background, n_noise)
            rng.shuffle(toks)
            yield SynthReport(f"{name.lower()}_{i:05d}", Label.malware(name), _render(toks))
    benign_pool = pools.shared + pools.background
    for i in range(spec.benign_count):
        toks = _draw(rng, benign_pool, n_main) + _draw(rng, pools.background, n_noise)
        rng.shuffle(toks)
        yield SynthReport(f"benign_{i:05d}", Label.benign(), _render(toks))


@dataclass(frozen=True)
class GeneratedCorpus:
    root: Path
    malware_manifest: Path
    benign_manifest: Path
    all_manifest: Path
    n_malware: int
    n_benign: int


def gen_corpus(spec: SynthCorpusSpec, out_dir: str | Path) -> GeneratedCorpus:
    """Write report files under ``out_dir/reports`` plus three manifests and the spec."""
    root = Path(out_dir)
    rep_dir = root / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    mal, ben = [], []
    for rep in iter_reports(spec):
        rel = Path("reports") / f"{rep.name}.txt"
        (root / rel).write_text(rep.text, encoding="utf-8", newline="\n")
        (mal if rep.label.is_malware else ben).append((rel.as_posix(), rep.label))
    out = GeneratedCorpus(
        root, root / "malware.tsv", root / "benign.tsv", root / "all.tsv", len(mal), len(ben)
    )
    write_manifest(out.malware_manifest, mal)
    write_manifest(out.benign_manifest, ben)
    write_manifest(out.all_manifest, mal + ben)
    (root / "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8", newline="\n")
    return out
