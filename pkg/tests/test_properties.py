from __future__ import annotations

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from behavsig.evaluation import ConfusionMatrix, FoldPlan, binary_metrics, harmonic_f1, kfold
from behavsig.lsh import LshIndex, MinHashParams, minhash
from behavsig.reports import Label, TokenBag
from behavsig.store import StoredRecord, rebuild_corpus, store_from_reports, update_store
from behavsig.vectorizer import FingerprintTable, IdfMode, build_corpus, cosine, fingerprint

from oracles import jaccard

TOKENS = [f"t{i}" for i in range(30)]
bags = st.dictionaries(st.sampled_from(TOKENS), st.integers(1, 5), min_size=1, max_size=12).map(TokenBag)
corpora = st.lists(bags, min_size=2, max_size=15)
modes = st.sampled_from(list(IdfMode))
SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@SETTINGS
@given(corpora, modes, st.data())
def test_cosine_symmetry_self_and_scale(docs, mode, data):
    corpus = build_corpus(docs)
    fps = [fingerprint(b, corpus, mode) for b in docs]
    i = data.draw(st.integers(0, len(fps) - 1))
    j = data.draw(st.integers(0, len(fps) - 1))
    a, b = fps[i], fps[j]
    assert cosine(a, b) == cosine(b, a)
    assert -1.0 <= cosine(a, b) <= 1.0
    if a.norm > 0:
        assert abs(cosine(a, a) - 1.0) <= 1e-9
    alpha = data.draw(st.floats(1e-3, 1e3))
    assert math.isclose(cosine(a.scaled(alpha), b), cosine(a, b), rel_tol=1e-9, abs_tol=1e-12)


@SETTINGS
@given(corpora, modes)
def test_fingerprint_norm_matches_weights(docs, mode):
    corpus = build_corpus(docs)
    for b in docs:
        fp = fingerprint(b, corpus, mode)
        assert math.isclose(fp.norm, math.sqrt(sum(w * w for w in fp.weights)), rel_tol=1e-12, abs_tol=1e-15)
        assert np.all(np.diff(fp.ids) > 0)
        assert np.all(fp.weights != 0.0)
        if mode is IdfMode.FLOOR_ZERO:
            assert np.all(fp.weights > 0.0)


@SETTINGS
@given(corpora)
def test_incremental_updates_equal_rebuild(docs):
    recs = [StoredRecord(f"r{i:03d}", Label.benign(), b, 1) for i, b in enumerate(docs)]
    store = store_from_reports(recs[:1], created_at="-")
    store.build_index(MinHashParams(16, 4, 4))
    for r in recs[1:]:
        update_store(store, r)
    assert store.corpus == rebuild_corpus(store)
    fresh = store_from_reports(recs, created_at="-")
    assert fresh.corpus.n_docs == store.corpus.n_docs
    assert fresh.corpus.df_by_token() == store.corpus.df_by_token()
    assert store.index.verify() and len(store.index) == len(recs)


@SETTINGS
@given(st.lists(st.sampled_from("ABCD"), min_size=1, max_size=80), st.integers(2, 10), st.integers(0, 99))
def test_kfold_is_a_partition(strata, n_folds, seed):
    items = [(f"x{i:03d}", s) for i, s in enumerate(strata)]
    plan = kfold(items, FoldPlan(n_folds, seed))
    folds = [plan.fold(i) for i in range(n_folds)]
    flat = [x for f in folds for x in f]
    assert sorted(flat) == sorted(i for i, _ in items)
    assert max(plan.sizes()) - min(plan.sizes()) <= (1 if not plan.stratified else len(set(strata)))
    assert kfold(items, FoldPlan(n_folds, seed)).assignments == plan.assignments


@SETTINGS
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn, tn):
    m = binary_metrics(tp, fp, fn, tn)
    if m.precision + m.recall > 0:
        assert abs(m.f1 - 2 * m.precision * m.recall / (m.precision + m.recall)) <= 1e-12
    assert abs(m.f1 - harmonic_f1(m.precision, m.recall)) <= 1e-12
    assert 0.0 <= m.f1 <= 1.0


@SETTINGS
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.sampled_from("ABC")), min_size=1, max_size=60))
def test_confusion_total_and_accuracy(pairs):
    truth, pred = [p[0] for p in pairs], [p[1] for p in pairs]
    cm = ConfusionMatrix.from_pairs(truth, pred, ["A", "B", "C"])
    assert cm.total == len(pairs)
    assert cm.accuracy == sum(t == p for t, p in pairs) / len(pairs)
    w = cm.weighted_metrics()
    assert 0.0 <= w.f1 <= 1.0
    assert abs(w.f1 - harmonic_f1(w.precision, w.recall)) <= 1e-12


@SETTINGS
@given(corpora, bags, st.integers(1, 4))
def test_knn_without_fallback_stays_in_candidates(docs, query, k):
    params = MinHashParams(16, 8, 2)
    corpus = build_corpus(docs)
    ids = [f"d{i:02d}" for i in range(len(docs))]
    table = FingerprintTable.from_bags(zip(ids, docs), corpus, IdfMode.LITERAL)
    index = LshIndex(params)
    for rid, b in zip(ids, docs):
        index.insert(rid, minhash(b, params))
    qsig = minhash(query, params)
    got = index.knn(fingerprint(query, corpus), qsig, k, table, fallback=False)
    cands = index.candidates(qsig)
    assert {n.id for n in got} <= cands
    assert len(got) == min(k, len(cands))
    sims = [n.similarity for n in got]
    assert sims == sorted(sims, reverse=True)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31))
def test_dissimilar_pairs_rarely_collide(seed):
    rng = np.random.default_rng(seed)
    params = MinHashParams()
    hits = 0
    for _ in range(100):
        toks = [f"w{x}" for x in rng.choice(10**9, size=190, replace=False)]
        a, b = set(toks[:100]), set(toks[90:])
        assert jaccard(a, b) <= 0.1
        sa, sb = minhash(a, params), minhash(b, params)
        hits += any(x == y for x, y in zip(sa.band_keys(params), sb.band_keys(params)))
    assert hits / 100 <= 0.05
