from __future__ import annotations

import pytest

from behavsig.reports import tokenize
from behavsig.store import StoredRecord
from behavsig.synth import SynthCorpusSpec, iter_reports


@pytest.fixture(autouse=True)
def _fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def synth_records(spec: SynthCorpusSpec) -> list[StoredRecord]:
    return [
        StoredRecord(r.name, r.label, tokenize(r.text), len(r.text.encode("utf-8")))
        for r in iter_reports(spec)
    ]


@pytest.fixture(scope="session")
def small_spec() -> SynthCorpusSpec:
    return SynthCorpusSpec(
        n_families=3, samples_per_family=(12, 10, 10), benign_count=20, tokens_per_report=120, seed=3
    )


@pytest.fixture(scope="session")
def small_records(small_spec) -> list[StoredRecord]:
    return synth_records(small_spec)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x.split()[1])):
            terminalreporter.write_line(line)
