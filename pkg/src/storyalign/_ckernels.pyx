# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the hot kernels.

Must stay semantically identical to _kernels_py: same enumeration order,
same tie rules, same degenerate handling.  The build is optional; the
package falls back to the numpy implementations when this module is
missing.
"""

from libc.math cimport INFINITY, NAN, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    #if defined(__GNUC__) || defined(__clang__)
    #define STORYALIGN_POPCNT64(x) __builtin_popcountll(x)
    #else
    static int STORYALIGN_POPCNT64(unsigned long long x)
    { int c = 0; while (x) { x &= x - 1; c++; } return c; }
    #endif
    """
    int STORYALIGN_POPCNT64(unsigned long long x) nogil


def nearest_active_pair(double[:, ::1] dist, cnp.int64_t[::1] keys,
                        cnp.uint8_t[::1] active):
    """Closest active pair (i < j); ties break by the sorted key pair."""
    cdef Py_ssize_t m = dist.shape[0]
    cdef Py_ssize_t i, j, bi = -1, bj = -1
    cdef double d, best_d = INFINITY
    cdef cnp.int64_t ka, kb, best_ka = 0, best_kb = 0
    cdef bint better
    for i in range(m):
        if not active[i]:
            continue
        for j in range(i + 1, m):
            if not active[j]:
                continue
            d = dist[i, j]
            if d > best_d:
                continue
            if keys[i] < keys[j]:
                ka, kb = keys[i], keys[j]
            else:
                ka, kb = keys[j], keys[i]
            if d < best_d:
                better = True
            else:
                better = ka < best_ka or (ka == best_ka and kb < best_kb)
            if better:
                best_d = d
                best_ka, best_kb = ka, kb
                bi, bj = i, j
    if bi < 0:
        raise ValueError("need at least two active clusters")
    return bi, bj


def min_intersection_combo(cnp.uint64_t[:, ::1] masks, Py_ssize_t k):
    """Exhaustive lexicographic scan for the k-combination with the
    smallest popcount of the AND of tag bitmasks."""
    cdef Py_ssize_t n = masks.shape[0]
    cdef Py_ssize_t words = masks.shape[1]
    cdef cnp.ndarray idx_arr = np.arange(k, dtype=np.intp)
    cdef cnp.intp_t[::1] idx = idx_arr
    cdef cnp.ndarray best_arr = np.empty(k, dtype=np.intp)
    cdef cnp.intp_t[::1] best = best_arr
    cdef cnp.ndarray inter_arr = np.empty(words, dtype=np.uint64)
    cdef cnp.uint64_t[::1] inter = inter_arr
    cdef int best_count = -1, count
    cdef Py_ssize_t pos, q, w
    while True:
        count = 0
        for w in range(words):
            inter[w] = masks[idx[0], w]
        for q in range(1, k):
            for w in range(words):
                inter[w] &= masks[idx[q], w]
        for w in range(words):
            count += STORYALIGN_POPCNT64(inter[w])
        if best_count < 0 or count < best_count:
            best_count = count
            for q in range(k):
                best[q] = idx[q]
        # advance to the next combination
        pos = k - 1
        while pos >= 0 and idx[pos] == n - k + pos:
            pos -= 1
        if pos < 0:
            break
        idx[pos] += 1
        for q in range(pos + 1, k):
            idx[q] = idx[q - 1] + 1
    return best_arr


def best_pooled_dot_combo(double[:, ::1] vectors, double[::1] text,
                          Py_ssize_t k, bint normalize):
    """Exhaustive lexicographic scan maximizing the pooled-mean similarity
    (cosine when normalize, else dot / k).  Zero pooled vectors are
    skipped under cosine; all-degenerate scans return indices of -1."""
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t d = vectors.shape[1]
    cdef cnp.ndarray idx_arr = np.arange(k, dtype=np.intp)
    cdef cnp.intp_t[::1] idx = idx_arr
    cdef cnp.ndarray best_arr = np.full(k, -1, dtype=np.intp)
    cdef cnp.intp_t[::1] best = best_arr
    cdef cnp.ndarray pooled_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] pooled = pooled_arr
    cdef double tnorm = 0.0, best_score = -INFINITY
    cdef double s, n2, score
    cdef Py_ssize_t pos, q, dd
    cdef bint found = False
    for dd in range(d):
        tnorm += text[dd] * text[dd]
    tnorm = sqrt(tnorm)
    while True:
        for dd in range(d):
            pooled[dd] = vectors[idx[0], dd]
        for q in range(1, k):
            for dd in range(d):
                pooled[dd] += vectors[idx[q], dd]
        s = 0.0
        for dd in range(d):
            s += text[dd] * pooled[dd]
        if normalize:
            n2 = 0.0
            for dd in range(d):
                n2 += pooled[dd] * pooled[dd]
            if n2 == 0.0:
                score = -INFINITY
            else:
                score = s / (tnorm * sqrt(n2))
        else:
            score = s / k
        if score > best_score:
            best_score = score
            found = True
            for q in range(k):
                best[q] = idx[q]
        pos = k - 1
        while pos >= 0 and idx[pos] == n - k + pos:
            pos -= 1
        if pos < 0:
            break
        idx[pos] += 1
        for q in range(pos + 1, k):
            idx[q] = idx[q - 1] + 1
    if not found:
        return best_arr, NAN
    return best_arr, best_score
