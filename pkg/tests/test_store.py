from __future__ import annotations

import json

import numpy as np
import pytest

from behavsig.errors import ConflictError, CorruptionError, IncompatibleFormatError, InvalidInputError, StaleStoreError
from behavsig.reports import Label, TokenBag, write_manifest
from behavsig.store import (
    ReportStore,
    StoredRecord,
    init_store,
    rebuild_corpus,
    store_from_reports,
    update_store,
)
from behavsig.vectorizer import build_corpus


def rec(rid: str, tokens: dict, label: Label = Label.benign()) -> StoredRecord:
    return StoredRecord(rid, label, TokenBag(tokens), 10)


def write_reports(tmp_path, texts: dict[str, str]) -> None:
    for name, text in texts.items():
        (tmp_path / name).write_text(text)


@pytest.fixture
def manifests(tmp_path):
    write_reports(tmp_path, {"m1.txt": "a b c", "m2.txt": "a d", "b1.txt": "x y", "b2.txt": "y z", "b3.txt": "x"})
    mal, ben = tmp_path / "mal.tsv", tmp_path / "ben.tsv"
    write_manifest(mal, [("m1.txt", Label.malware("F1")), ("m2.txt", Label.malware("F2"))])
    ben.write_text("b1.txt\nb2.txt\nb3.txt\n")
    return mal, ben


def test_init_store_counts_and_labels(manifests):
    store = init_store(*manifests)
    assert len(store) == 5 and store.corpus.n_docs == 5
    assert sorted(r.label.class_name for r in store) == ["Benign", "Benign", "Benign", "F1", "F2"]
    assert not store.dirty and store.ingest_errors == []


def test_init_store_malware_only(manifests, tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    store = init_store(manifests[0], empty)
    assert {r.label.is_malware for r in store} == {True}


def test_init_store_collects_errors(manifests, tmp_path):
    mal, ben = manifests
    with ben.open("a") as fh:
        fh.write("missing.txt\n")
        fh.write("m1.txt\tMalware\tF1\n")
    store = init_store(mal, ben)
    assert len(store) == 5
    msgs = sorted(e.message for e in store.ingest_errors)
    assert len(msgs) == 2 and any("missing.txt" in m for m in msgs)


def test_init_store_zero_success_is_fatal(tmp_path):
    m = tmp_path / "ben.tsv"
    m.write_text("nope.txt\n")
    with pytest.raises(InvalidInputError):
        init_store(None, m)


def test_init_store_independent_of_workers(manifests, tmp_path):
    outs = []
    for w in (1, 4, 8):
        path = tmp_path / f"s{w}.jsonl"
        init_store(*manifests, workers=w).save(path)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_add_novel_and_existing_tokens():
    store = store_from_reports([rec("a", {"p": 1, "q": 2})])
    update_store(store, rec("b", {"p": 3, "new": 1}))
    assert store.corpus.df_of("new") == 1 and store.corpus.df_of("p") == 2
    vocab_before = dict(store.corpus.vocab)
    update_store(store, rec("c", {"p": 1, "q": 1}))
    assert store.corpus.vocab == vocab_before
    assert store.corpus.df_of("p") == 3 and store.corpus.df_of("q") == 2


def test_duplicate_id_leaves_store_unchanged():
    store = store_from_reports([rec("a", {"p": 1})])
    before = store.corpus.df_by_token(), store.corpus.n_docs
    with pytest.raises(ConflictError):
        update_store(store, rec("a", {"zzz": 1}))
    assert (store.corpus.df_by_token(), store.corpus.n_docs) == before


def test_incremental_equals_rebuild():
    rng = np.random.default_rng(5)
    store = store_from_reports([rec(f"i{i}", {f"t{i}": 1}) for i in range(5)])
    for i in range(50):
        toks = {f"t{x}": int(rng.integers(1, 3)) for x in rng.choice(40, 5, replace=False)}
        update_store(store, rec(f"u{i:02d}", toks))
    assert store.corpus == rebuild_corpus(store)
    assert store.corpus.df_by_token() == build_corpus([r.bag for r in store]).df_by_token()
    assert store.corpus.n_docs == 55


def test_update_inserts_into_attached_index():
    store = store_from_reports([rec("a", {"p": 1})])
    index = store.build_index()
    update_store(store, rec("b", {"p": 1, "q": 1}))
    assert "b" in index


def test_iteration_sorted_by_id():
    store = store_from_reports([rec("c", {"x": 1}), rec("a", {"x": 1})])
    update_store(store, rec("b", {"x": 1}))
    assert [r.id for r in store] == ["a", "b", "c"]
    assert [r.id for r in store.insertion_order()] == ["a", "c", "b"]


def test_dirty_store_refuses_fingerprints():
    store = ReportStore()
    store.add(rec("a", {"x": 1}), defer_stats=True)
    assert store.dirty
    with pytest.raises(StaleStoreError):
        store.fingerprint_table()
    store.refresh()
    assert len(store.fingerprint_table()) == 1


def test_round_trip_100_records(tmp_path):
    rng = np.random.default_rng(8)
    recs = [
        StoredRecord(f"r{i:03d}", Label.malware(f"F{i % 3}") if i % 2 else Label.benign(),
                     TokenBag({f"t{x}": int(rng.integers(1, 5)) for x in rng.choice(60, 7, replace=False)}), i)
        for i in range(100)
    ]
    store = store_from_reports(recs)
    path = tmp_path / "store.jsonl"
    store.save(path)
    back = ReportStore.load(path)
    assert back == store
    assert back.corpus.vocab == store.corpus.vocab
    assert back.created_at == store.created_at == "2023-11-14T22:13:20Z"


def test_append_keeps_file_loadable(tmp_path):
    store = store_from_reports([rec("a", {"x": 1})])
    path = tmp_path / "store.jsonl"
    store.save(path)
    size = path.stat().st_size
    for i in range(3):
        update_store(store, rec(f"n{i}", {"y": i + 1}))
        store.append_to(path, store[f"n{i}"])
    assert path.stat().st_size > size
    back = ReportStore.load(path)
    assert back == store
    first = path.read_text().splitlines()[0]
    assert json.loads(first)["record_count"] == 4


def test_load_empty_file(tmp_path):
    path = tmp_path / "store.jsonl"
    path.write_text("")
    with pytest.raises(CorruptionError, match="missing manifest"):
        ReportStore.load(path)


def test_load_newer_format(tmp_path):
    path = tmp_path / "store.jsonl"
    store_from_reports([rec("a", {"x": 1})]).save(path)
    text = path.read_text().replace('"format_version": 1', '"format_version": 2')
    path.write_text(text)
    with pytest.raises(IncompatibleFormatError, match="2.*1"):
        ReportStore.load(path)


def test_load_truncated_and_count_mismatch(tmp_path):
    path = tmp_path / "store.jsonl"
    store_from_reports([rec("a", {"x": 1}), rec("b", {"y": 1})]).save(path)
    full = path.read_text()
    path.write_text(full[:-3])
    with pytest.raises(CorruptionError) as err:
        ReportStore.load(path)
    assert err.value.line == 3
    lines = full.splitlines(keepends=True)
    path.write_text("".join(lines[:2]))
    with pytest.raises(CorruptionError, match="declares 2"):
        ReportStore.load(path)
