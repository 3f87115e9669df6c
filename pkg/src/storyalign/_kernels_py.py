"""Pure-numpy fallback for the hot kernels.

Semantics are kept in lockstep with the compiled versions in
_ckernels.pyx: identical enumeration order, identical tie-breaking, and
integer comparisons wherever ordering determinism is load-bearing.  The
clustering scan compares distances that were computed once (in numpy) by
the caller, so the fallback and compiled paths see the same floats.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np


def nearest_active_pair(dist: np.ndarray, keys: np.ndarray,
                        active: np.ndarray) -> tuple[int, int]:
    """Closest active pair (i < j) in a symmetric distance matrix.

    Ties break by the sorted key pair (keys hold each cluster's
    deterministic rank).  At least two active entries required.
    """
    act = active.astype(bool)
    ok = act[:, None] & act[None, :]
    ok &= np.triu(np.ones_like(ok), k=1).astype(bool)
    if not ok.any():
        raise ValueError("need at least two active clusters")
    masked = np.where(ok, dist, np.inf)
    best = masked.min()
    ii, jj = np.nonzero(masked == best)
    ka = np.minimum(keys[ii], keys[jj])
    kb = np.maximum(keys[ii], keys[jj])
    pick = np.lexsort((kb, ka))[0]
    return int(ii[pick]), int(jj[pick])


def min_intersection_combo(masks: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive scan over k-combinations (lexicographic by index) for
    the smallest popcount of the AND of tag bitmasks.

    masks: (n, words) uint64.  Earliest combination wins ties, which is
    the lexicographically smallest index tuple.
    """
    n = masks.shape[0]
    ints = [int.from_bytes(row.tobytes(), "little") for row in np.ascontiguousarray(masks)]
    best_count = -1
    best: tuple[int, ...] | None = None
    for combo in combinations(range(n), k):
        inter = ints[combo[0]]
        for idx in combo[1:]:
            inter &= ints[idx]
            if inter == 0 and best_count == 0:
                break
        count = inter.bit_count()
        if best is None or count < best_count:
            best_count = count
            best = combo
    return np.asarray(best, dtype=np.intp)


def best_pooled_dot_combo(vectors: np.ndarray, text: np.ndarray, k: int,
                          normalize: bool) -> tuple[np.ndarray, float]:
    """Exhaustive scan over k-combinations maximizing the pooled-mean
    similarity to `text` (cosine when normalize, else dot).

    Strictly-greater updates keep the lexicographically smallest tuple on
    ties.  Combinations whose pooled vector is zero are skipped under
    cosine; if every combination degenerates the indices come back as -1.
    """
    n = vectors.shape[0]
    tnorm = math.sqrt(float(text @ text))
    best_score = -math.inf
    best: tuple[int, ...] | None = None
    for combo in combinations(range(n), k):
        pooled = vectors[list(combo)].sum(axis=0)
        s = float(text @ pooled)
        if normalize:
            n2 = float(pooled @ pooled)
            if n2 == 0.0:
                continue
            score = s / (tnorm * math.sqrt(n2))
        else:
            score = s / k
        if score > best_score:
            best_score = score
            best = combo
    if best is None:
        return np.full(k, -1, dtype=np.intp), math.nan
    return np.asarray(best, dtype=np.intp), best_score
