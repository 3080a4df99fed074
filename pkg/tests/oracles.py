"""Independent, deliberately naive reference implementations.

Nothing here imports from behavsig except plain data types, so a bug in the
package cannot hide behind a shared helper.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence


def naive_idf(bags: Sequence[Mapping[str, int]], token: str, floor: bool = False) -> float:
    n = len(bags)
    df = 0
    for bag in bags:
        if token in bag:
            df += 1
    v = math.log(n / (1 + df))
    return max(0.0, v) if floor else v


def naive_tfidf(bags: Sequence[Mapping[str, int]], floor: bool = False) -> list[dict[str, float]]:
    """Weight of every token of every bag, one double loop over docs and tokens."""
    memo: dict[str, float] = {}
    out = []
    for bag in bags:
        row = {}
        for tok, tf in bag.items():
            if tok not in memo:
                memo[tok] = naive_idf(bags, tok, floor)
            row[tok] = tf * memo[tok]
        out.append(row)
    return out


def naive_cosine(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    num = 0.0
    for t, w in a.items():
        if t in b:
            num += w * b[t]
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return num / (na * nb)


def scan_loop_verdict(
    stored: Sequence[tuple[str, Mapping[str, int], str]], query: Mapping[str, int], floor: bool = False
) -> tuple[str, float, str | None]:
    """Single-maximum scan over the joint corpus (stored reports plus the query).

    ``stored`` holds (id, bag, class name). Starts from Benign at similarity
    0 and adopts a report's class only on a strictly greater cosine; reports
    are visited in ascending id order so ties keep the lowest id.
    Returns (class, max similarity, neighbour id).
    """
    bags = [b for _, b, _ in stored] + [query]
    weights = naive_tfidf(bags, floor)
    qw = weights[-1]
    best_cls, best_sim, best_id = "Benign", 0.0, None
    order = sorted(range(len(stored)), key=lambda i: stored[i][0])
    for i in order:
        s = naive_cosine(qw, weights[i])
        if s > best_sim:
            best_sim, best_cls, best_id = s, stored[i][2], stored[i][0]
    return best_cls, best_sim, best_id


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def band_key_candidates(query_values: Sequence[int], stored: Mapping[str, Sequence[int]], b: int, r: int) -> set[str]:
    """Ids sharing at least one full band with the query, by direct comparison."""
    out = set()
    for rid, vals in stored.items():
        for j in range(b):
            if list(vals[j * r : (j + 1) * r]) == list(query_values[j * r : (j + 1) * r]):
                out.add(rid)
                break
    return out


def exhaustive_argmax(query: Mapping[str, float], fps: Mapping[str, Mapping[str, float]]) -> tuple[str, float]:
    best_id, best = None, -2.0
    for rid in sorted(fps):
        s = naive_cosine(query, fps[rid])
        if s > best:
            best_id, best = rid, s
    return best_id, best
