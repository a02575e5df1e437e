# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled evaluation kernels. Same semantics as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def iou_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cdef double[:, ::1] B = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double iw, ih, inter, union, area_a, area_b
    for i in range(n):
        area_a = (A[i, 2] - A[i, 0]) * (A[i, 3] - A[i, 1])
        for j in range(m):
            iw = min(A[i, 2], B[j, 2]) - max(A[i, 0], B[j, 0])
            ih = min(A[i, 3], B[j, 3]) - max(A[i, 1], B[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            area_b = (B[j, 2] - B[j, 0]) * (B[j, 3] - B[j, 1])
            union = area_a + area_b - inter
            if union > 0:
                O[i, j] = inter / union
    return out


def greedy_match(iou, double thresh):
    cdef double[:, ::1] M = np.ascontiguousarray(iou, dtype=np.float64)
    cdef Py_ssize_t n_det = M.shape[0], n_gt = M.shape[1], i, j, best_j
    cdef double best
    taken_arr = np.zeros(n_gt, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    out = np.full(n_det, -1, dtype=np.int64)
    cdef long long[::1] res = out
    for i in range(n_det):
        best = -1.0
        best_j = -1
        for j in range(n_gt):
            if not taken[j] and M[i, j] > best:
                best = M[i, j]
                best_j = j
        if best_j >= 0 and best >= thresh:
            taken[best_j] = 1
            res[i] = best_j
    return out


def average_precision_from_hits(hits, long long n_gt):
    cdef double[::1] H = np.ascontiguousarray(hits, dtype=np.float64)
    cdef Py_ssize_t n = H.shape[0], i
    if n_gt <= 0 or n == 0:
        return 0.0
    prec_arr = np.empty(n, dtype=np.float64)
    rec_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] prec = prec_arr
    cdef double[::1] rec = rec_arr
    cdef double tp = 0.0, fp = 0.0
    for i in range(n):
        tp += H[i]
        fp += 1.0 - H[i]
        rec[i] = tp / n_gt
        prec[i] = tp / (tp + fp)
    for i in range(n - 2, -1, -1):
        if prec[i + 1] > prec[i]:
            prec[i] = prec[i + 1]
    cdef double ap = 0.0, prev = 0.0
    for i in range(n):
        ap += (rec[i] - prev) * prec[i]
        prev = rec[i]
    return ap


def silhouette_samples(X, labels):
    cdef double[:, ::1] P = np.ascontiguousarray(X, dtype=np.float64)
    cdef long long[::1] L = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = P.shape[0], dim = P.shape[1], i, j, k, c
    cdef Py_ssize_t K = (int(np.max(labels)) + 1) if n else 0
    counts_arr = np.bincount(np.asarray(labels, dtype=np.int64), minlength=K).astype(np.float64)
    cdef double[::1] counts = counts_arr
    sums_arr = np.zeros((n, K), dtype=np.float64)
    cdef double[:, ::1] sums = sums_arr
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] res = out
    cdef double d, diff, a, b, m
    for i in range(n):
        for j in range(i + 1, n):
            d = 0.0
            for k in range(dim):
                diff = P[i, k] - P[j, k]
                d += diff * diff
            d = sqrt(d)
            sums[i, L[j]] += d
            sums[j, L[i]] += d
    for i in range(n):
        c = L[i]
        if counts[c] < 2:
            continue
        a = sums[i, c] / (counts[c] - 1)
        b = INFINITY
        for k in range(K):
            if k != c and counts[k] > 0 and sums[i, k] / counts[k] < b:
                b = sums[i, k] / counts[k]
        m = a if a > b else b
        res[i] = 0.0 if m == 0 else (b - a) / m
    return out
