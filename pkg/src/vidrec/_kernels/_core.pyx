# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused top-k scan, per-feed DCG, rank AUC, decay pooling."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log2, NAN

cnp.import_array()


cdef inline bint _worse(double s_a, long long id_a, double s_b, long long id_b) noexcept nogil:
    # True when (s_a, id_a) ranks strictly below (s_b, id_b): lower score, or equal score and larger id.
    if s_a < s_b:
        return True
    if s_a > s_b:
        return False
    return id_a > id_b


cdef void _sift_down(double[::1] hs, long long[::1] hid, long long[::1] hpos,
                     Py_ssize_t size, Py_ssize_t i) noexcept nogil:
    # Min-heap on rank order: the root is the worst kept candidate.
    cdef Py_ssize_t child, right
    cdef double ts
    cdef long long tid, tpos
    while True:
        child = 2 * i + 1
        if child >= size:
            break
        right = child + 1
        if right < size and _worse(hs[right], hid[right], hs[child], hid[child]):
            child = right
        if _worse(hs[child], hid[child], hs[i], hid[i]):
            ts = hs[i]; hs[i] = hs[child]; hs[child] = ts
            tid = hid[i]; hid[i] = hid[child]; hid[child] = tid
            tpos = hpos[i]; hpos[i] = hpos[child]; hpos[child] = tpos
            i = child
        else:
            break


cdef void _sift_up(double[::1] hs, long long[::1] hid, long long[::1] hpos,
                   Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t parent
    cdef double ts
    cdef long long tid, tpos
    while i > 0:
        parent = (i - 1) // 2
        if _worse(hs[i], hid[i], hs[parent], hid[parent]):
            ts = hs[i]; hs[i] = hs[parent]; hs[parent] = ts
            tid = hid[i]; hid[i] = hid[parent]; hid[parent] = tid
            tpos = hpos[i]; hpos[i] = hpos[parent]; hpos[parent] = tpos
            i = parent
        else:
            break


cdef inline double _row_dot(const double[:, ::1] m, Py_ssize_t i, const double[::1] q,
                           Py_ssize_t d) noexcept nogil:
    # Lane j % 4 accumulates sequentially; identical rows give identical sums
    # wherever they sit in memory (BLAS does not guarantee that).
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t j = 0
    while j + 4 <= d:
        s0 += m[i, j] * q[j]
        s1 += m[i, j + 1] * q[j + 1]
        s2 += m[i, j + 2] * q[j + 2]
        s3 += m[i, j + 3] * q[j + 3]
        j += 4
    if j < d:
        s0 += m[i, j] * q[j]
    if j + 1 < d:
        s1 += m[i, j + 1] * q[j + 1]
    if j + 2 < d:
        s2 += m[i, j + 2] * q[j + 2]
    return (s0 + s1) + (s2 + s3)


def row_scores(const double[:, ::1] matrix, const double[::1] query):
    """Dot product of every row with ``query`` in the fixed four-lane order."""
    cdef Py_ssize_t n = matrix.shape[0], d = matrix.shape[1], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = _row_dot(matrix, i, query, d)
    return out_arr


def topk_dot(const double[:, ::1] matrix, const long long[::1] ids, const double[::1] query,
             Py_ssize_t k, const unsigned char[::1] mask):
    """Row positions and scores of the k best candidates, best first.

    One pass scores each unmasked row and keeps a bounded heap over
    (score, id), so ties resolve to the smaller id.
    """
    cdef Py_ssize_t n = matrix.shape[0], d = matrix.shape[1]
    cdef Py_ssize_t i, size = 0
    cdef double s
    if k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    heap_s_arr = np.empty(k, dtype=np.float64)
    heap_id_arr = np.empty(k, dtype=np.int64)
    heap_pos_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] hs = heap_s_arr
    cdef long long[::1] hid = heap_id_arr
    cdef long long[::1] hpos = heap_pos_arr
    with nogil:
        for i in range(n):
            if not mask[i]:
                continue
            s = _row_dot(matrix, i, query, d)
            if size < k:
                hs[size] = s; hid[size] = ids[i]; hpos[size] = i
                size += 1
                _sift_up(hs, hid, hpos, size - 1)
            elif _worse(hs[0], hid[0], s, ids[i]):
                hs[0] = s; hid[0] = ids[i]; hpos[0] = i
                _sift_down(hs, hid, hpos, size, 0)
    order = np.lexsort((heap_id_arr[:size], -heap_s_arr[:size]))
    return heap_pos_arr[:size][order], heap_s_arr[:size][order]


def segment_ndcg(const double[::1] gains, const long long[::1] offsets):
    """NDCG of each segment of ``gains`` (served order) against its ideal order.

    Gains are divided by the segment maximum first. NDCG is scale-free, and
    this makes a constant weight on every gain cancel exactly in floating point.
    """
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    cdef Py_ssize_t f, p, q, lo, hi, m, longest = 0
    cdef double dcg, idcg, g, gmax
    out_arr = np.empty(n_seg, dtype=np.float64)
    cdef double[::1] out = out_arr
    for f in range(n_seg):
        if offsets[f + 1] - offsets[f] > longest:
            longest = offsets[f + 1] - offsets[f]
    buf_arr = np.empty(max(longest, 1), dtype=np.float64)
    cdef double[::1] buf = buf_arr
    with nogil:
        for f in range(n_seg):
            lo = offsets[f]
            hi = offsets[f + 1]
            m = hi - lo
            gmax = 0.0
            for p in range(m):
                if gains[lo + p] > gmax:
                    gmax = gains[lo + p]
            if gmax <= 0.0:
                out[f] = NAN
                continue
            dcg = 0.0
            # insertion sort into descending order; feeds are short
            for p in range(m):
                g = gains[lo + p] / gmax
                dcg += g / log2(p + 2.0)
                q = p
                while q > 0 and buf[q - 1] < g:
                    buf[q] = buf[q - 1]
                    q -= 1
                buf[q] = g
            idcg = 0.0
            for p in range(m):
                idcg += buf[p] / log2(p + 2.0)
            out[f] = dcg / idcg if idcg > 0.0 else NAN
    return out_arr


def auc(const double[::1] scores, const unsigned char[::1] labels):
    """Mann-Whitney AUC with tied scores counted as half."""
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t i, j, t
    cdef double n_pos = 0.0, n_neg = 0.0, rank_sum = 0.0, avg_rank
    cdef long long[::1] order = np.argsort(np.asarray(scores)).astype(np.int64, copy=False)  # tie groups are contiguous under any sort
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg_rank = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            if labels[order[t]]:
                rank_sum += avg_rank
                n_pos += 1.0
            else:
                n_neg += 1.0
        i = j + 1
    if n_pos == 0.0 or n_neg == 0.0:
        return np.nan
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)


def decay_pool(const double[:, ::1] embs, const double[::1] ages, double lam):
    """exp(-lam * age)-weighted mean of the rows of ``embs``."""
    cdef Py_ssize_t n = embs.shape[0]
    cdef Py_ssize_t d = embs.shape[1]
    cdef Py_ssize_t i, j
    cdef double min_age = ages[0], w, total = 0.0
    out_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(1, n):
        if ages[i] < min_age:
            min_age = ages[i]
    # shifting by the youngest age keeps the largest weight at 1 (no underflow of the sum)
    for i in range(n):
        w = exp(-lam * (ages[i] - min_age))
        total += w
        for j in range(d):
            out[j] += w * embs[i, j]
    for j in range(d):
        out[j] /= total
    return out_arr
