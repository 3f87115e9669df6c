"""Timing comparison between the compiled kernels and the pure-numpy
fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from storyalign import _kernels_py as fallback

try:
    from storyalign import _ckernels as compiled
except ImportError:
    compiled = None


def _time(fn, *args, repeat: int) -> float:
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_nearest_pair(rng, n):
    v = rng.standard_normal((n, 8))
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    dist = np.ascontiguousarray(1.0 - u @ u.T)
    np.fill_diagonal(dist, 0.0)
    keys = np.arange(n, dtype=np.int64)
    active = np.ones(n, dtype=np.uint8)
    return f"nearest_active_pair n={n}", (dist, keys, active)


def bench_min_intersection(rng, n, k):
    masks = rng.integers(0, 2 ** 63, size=(n, 2), dtype=np.int64).astype(np.uint64)
    return f"min_intersection_combo n={n} k={k} ({math.comb(n, k)} combos)", (masks, k)


def bench_best_pooled(rng, n, k):
    rows = np.ascontiguousarray(rng.standard_normal((n, 16)))
    text = np.ascontiguousarray(rng.standard_normal(16))
    return f"best_pooled_dot_combo n={n} k={k} ({math.comb(n, k)} combos)", \
        (rows, text, k, True)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    cases = [
        ("nearest_active_pair", bench_nearest_pair(rng, 400)),
        ("min_intersection_combo", bench_min_intersection(rng, 18, 5)),
        ("best_pooled_dot_combo", bench_best_pooled(rng, 18, 5)),
    ]
    print(f"{'case':<52} {'fallback':>12} {'compiled':>12} {'speedup':>9}")
    for name, (label, call_args) in cases:
        fb_fn = getattr(fallback, name)
        t_fb = _time(fb_fn, *call_args, repeat=args.repeat)
        if compiled is None:
            print(f"{label:<52} {t_fb * 1e3:>10.2f}ms {'absent':>12} {'-':>9}")
            continue
        c_fn = getattr(compiled, name)
        assert_equivalent(name, fb_fn(*call_args), c_fn(*call_args))
        t_c = _time(c_fn, *call_args, repeat=args.repeat)
        print(f"{label:<52} {t_fb * 1e3:>10.2f}ms {t_c * 1e3:>10.2f}ms {t_fb / t_c:>8.1f}x")


def assert_equivalent(name, a, b) -> None:
    if name == "nearest_active_pair":
        assert tuple(a) == tuple(b), (a, b)
    elif name == "min_intersection_combo":
        assert np.array_equal(a, b), (a, b)
    else:
        ai, asc = a
        bi, bsc = b
        assert np.array_equal(ai, bi) and abs(asc - bsc) < 1e-12, (a, b)


if __name__ == "__main__":
    main()
