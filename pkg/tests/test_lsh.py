from __future__ import annotations

import numpy as np
import pytest

from behavsig.errors import ConflictError, CorruptionError, IncompatibleFormatError, InvalidInputError, ParamsMismatchError
from behavsig.lsh import (
    EMPTY_VALUE,
    LshIndex,
    MinHashParams,
    MinHashSignature,
    brute_force_knn,
    minhash,
    mix64,
)
from behavsig.reports import TokenBag
from behavsig.vectorizer import FingerprintTable, build_corpus, fingerprint

from oracles import band_key_candidates, jaccard


def pair_with_jaccard(rng: np.random.Generator, j: float, union: int = 100) -> tuple[set, set]:
    common = round(j * union)
    own = (union - common) // 2
    toks = [f"w{x}" for x in rng.choice(10**9, size=common + 2 * own, replace=False)]
    shared = toks[:common]
    return set(shared + toks[common : common + own]), set(shared + toks[common + own :])


def test_params_validation_and_parse():
    assert MinHashParams.parse("64,16,4", seed=9) == MinHashParams(64, 16, 4, 9)
    with pytest.raises(InvalidInputError):
        MinHashParams(128, 32, 3)
    with pytest.raises(InvalidInputError):
        MinHashParams.parse("128,32")
    assert MinHashParams().threshold == pytest.approx((1 / 32) ** 0.25)


def test_mix64_matches_reference_splitmix_finaliser():
    def ref(z: int) -> int:
        m = (1 << 64) - 1
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
        return z ^ (z >> 31)

    xs = np.array([0, 1, 12345, (1 << 64) - 1], dtype=np.uint64)
    assert [int(v) for v in mix64(xs)] == [ref(int(x)) for x in xs]


def test_minhash_deterministic_and_set_based():
    p = MinHashParams()
    assert minhash(["a", "b", "a"], p) == minhash(["b", "a"], p)
    assert len(minhash(["a"], p)) == 128
    assert minhash(["a", "b"], MinHashParams(seed=2)) != minhash(["a", "b"], p)


def test_minhash_empty_set_is_sentinel():
    sig = minhash([], MinHashParams())
    assert np.all(sig.values == EMPTY_VALUE)


def test_minhash_is_min_over_token_hashes():
    p = MinHashParams(8, 4, 2, seed=5)
    toks = ["x", "y", "z"]
    per_token = [minhash([t], p).values for t in toks]
    assert np.array_equal(minhash(toks, p).values, np.minimum.reduce(per_token))


def test_agreement_estimates_jaccard():
    rng = np.random.default_rng(0)
    p = MinHashParams()
    for j in (0.2, 0.5, 0.8):
        est = []
        for _ in range(60):
            a, b = pair_with_jaccard(rng, j)
            assert jaccard(a, b) == pytest.approx(j)
            est.append(minhash(a, p).agreement(minhash(b, p)))
        se = np.sqrt(j * (1 - j) / 128) / np.sqrt(60)
        assert abs(np.mean(est) - j) < 4 * se


def test_disjoint_sets_rarely_agree():
    rng = np.random.default_rng(1)
    toks = [f"t{x}" for x in rng.choice(10**9, 2000, replace=False)]
    a, b = minhash(toks[:1000]), minhash(toks[1000:])
    assert a.agreement(b) <= 0.05


def test_signature_hex_round_trip():
    sig = minhash(["q", "r"])
    assert MinHashSignature.from_hex(sig.hex()) == sig


def test_insert_candidates_remove():
    p = MinHashParams()
    idx = LshIndex(p)
    assert idx.candidates(minhash(["a"])) == set()
    s1 = minhash(["a", "b", "c"])
    before = [dict((k, set(v)) for k, v in t.items()) for t in idx.buckets]
    idx.insert("r1", s1)
    idx.insert("r2", s1)
    assert idx.candidates(s1) == {"r1", "r2"}
    assert all(any({"r1", "r2"} <= m for m in t.values()) for t in idx.buckets)
    with pytest.raises(ConflictError):
        idx.insert("r1", s1)
    idx.remove("r1")
    idx.remove("r2")
    assert idx.buckets == before
    assert idx.verify()


def test_every_id_in_one_bucket_per_band():
    idx = LshIndex()
    for i in range(20):
        idx.insert(f"r{i}", minhash([f"t{i}", f"t{i + 1}", "common"]))
    for table in idx.buckets:
        members = [m for ms in table.values() for m in ms]
        assert sorted(members) == sorted(idx.signatures)
    assert idx.verify()


def test_candidates_match_band_key_oracle():
    rng = np.random.default_rng(4)
    p = MinHashParams()
    idx = LshIndex(p)
    stored = {}
    for i in range(1000):
        sig = minhash([f"v{x}" for x in rng.choice(5000, 40, replace=False)], p)
        idx.insert(f"r{i:04d}", sig)
        stored[f"r{i:04d}"] = [int(v) for v in sig.values]
    q = minhash([f"v{x}" for x in rng.choice(5000, 40, replace=False)], p)
    expect = band_key_candidates([int(v) for v in q.values], stored, p.n_bands, p.rows_per_band)
    got = idx.candidates(q)
    assert got == expect
    assert len(got) < 50


def _table_for(bags: dict[str, TokenBag]):
    corpus = build_corpus(list(bags.values()))
    return corpus, FingerprintTable.from_bags(bags.items(), corpus)


def test_knn_self_is_first_and_saturation():
    bags = {f"r{i}": TokenBag({f"t{i}": 1, f"t{i + 1}": 2, "x": 1}) for i in range(6)}
    corpus, table = _table_for(bags)
    idx = LshIndex()
    for rid, bag in bags.items():
        idx.insert(rid, minhash(bag))
    q = fingerprint(bags["r3"], corpus)
    res = idx.knn(q, minhash(bags["r3"]), 1, table)
    assert res[0].id == "r3" and res[0].similarity == pytest.approx(1.0)
    allres = idx.knn(q, minhash(bags["r3"]), 50, table, fallback=True, min_candidates=50)
    assert len(allres) == 6 and allres.fallback_used
    assert [n.id for n in allres] == [n.id for n in brute_force_knn(q, {r: table[r] for r in bags}, 50)]


def test_knn_empty_index():
    idx = LshIndex()
    corpus, table = _table_for({"a": TokenBag({"z": 1})})
    assert idx.knn(fingerprint(TokenBag({"z": 1}), corpus), minhash(["z"]), 3, table) == []


def test_knn_fallback_when_no_candidates():
    bags = {f"r{i}": TokenBag({f"t{i}": 1, "shared": 1}) for i in range(5)}
    corpus, table = _table_for(bags)
    idx = LshIndex()
    for rid, bag in bags.items():
        idx.insert(rid, minhash(bag))
    qbag = TokenBag({"t2": 1, "never": 1, "seen": 1, "before": 1})
    qsig = minhash(qbag)
    assert idx.candidates(qsig) == set()
    q = fingerprint(qbag, corpus)
    res = idx.knn(q, qsig, 2, table)
    assert res.fallback_used
    assert res == brute_force_knn(q, {r: table[r] for r in bags}, 2)
    assert idx.knn(q, qsig, 2, table, fallback=False) == []


def test_knn_ties_break_by_id():
    bags = {rid: TokenBag({"a": 1, "b": 1}) for rid in ("r9", "r1", "r5")}
    bags["zz"] = TokenBag({"c": 1})
    corpus, table = _table_for(bags)
    idx = LshIndex()
    for rid, bag in bags.items():
        idx.insert(rid, minhash(bag))
    res = idx.knn(fingerprint(bags["r9"], corpus), minhash(bags["r9"]), 3, table)
    assert [n.id for n in res] == ["r1", "r5", "r9"]


def test_knn_mapping_and_table_agree():
    rng = np.random.default_rng(2)
    bags = {f"r{i:02d}": TokenBag({f"t{x}": 1 for x in rng.choice(30, 8, replace=False)}) for i in range(40)}
    corpus, table = _table_for(bags)
    idx = LshIndex(MinHashParams(64, 32, 2))
    for rid, bag in bags.items():
        idx.insert(rid, minhash(bag, idx.params))
    fps = {r: fingerprint(b, corpus) for r, b in bags.items()}
    for rid in list(bags)[:10]:
        q, s = fps[rid], minhash(bags[rid], idx.params)
        a = idx.knn(q, s, 3, table)
        b = idx.knn(q, s, 3, fps)
        assert [n.id for n in a] == [n.id for n in b]
        assert [n.similarity for n in a] == pytest.approx([n.similarity for n in b], abs=1e-12)
        assert {n.id for n in idx.knn(q, s, 3, table, fallback=False)} <= idx.candidates(s)


def test_knn_candidate_budget():
    bags = {f"r{i:03d}": TokenBag({"a": 1, "b": 1, "c": 1, f"u{i}": 1}) for i in range(200)}
    corpus, table = _table_for(bags)
    idx = LshIndex()
    for rid, bag in bags.items():
        idx.insert(rid, minhash(bag))
    q, s = fingerprint(bags["r007"], corpus), minhash(bags["r007"])
    res = idx.knn(q, s, 1, table, max_candidates=10)
    assert res.n_candidates <= 10
    assert res[0].id == "r007"  # its own buckets are the smallest
    with pytest.raises(InvalidInputError):
        idx.knn(q, s, 5, table, max_candidates=2)


def test_save_load_append(tmp_path):
    p = MinHashParams(64, 16, 4, seed=3)
    idx = LshIndex(p)
    idx.insert("a", minhash(["x", "y"], p))
    path = tmp_path / "index.jsonl"
    idx.save(path)
    idx.append(path, "b", minhash(["y", "z"], p))
    back = LshIndex.load(path, expected=p)
    assert back.signatures == idx.signatures and back.buckets == idx.buckets
    with pytest.raises(ParamsMismatchError):
        LshIndex.load(path, expected=MinHashParams(64, 16, 4, seed=4))
    with pytest.raises(ParamsMismatchError):
        LshIndex.load(path, expected=MinHashParams())


def test_load_errors(tmp_path):
    path = tmp_path / "index.jsonl"
    idx = LshIndex()
    idx.insert("a", minhash(["x"]))
    idx.save(path)
    text = path.read_text()
    path.write_text(text[:-5])
    with pytest.raises(CorruptionError) as err:
        LshIndex.load(path)
    assert err.value.line == 2
    path.write_text(text.replace('"format_version": 1', '"format_version": 9'))
    with pytest.raises(IncompatibleFormatError):
        LshIndex.load(path)
    path.write_text("")
    with pytest.raises(CorruptionError):
        LshIndex.load(path)


def test_collision_probability_formula():
    p = MinHashParams()
    assert p.collision_probability(0.5) == pytest.approx(1 - (1 - 0.5**4) ** 32)
