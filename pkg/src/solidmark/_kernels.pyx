# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def pairwise_l2(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], d = A.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j, k
    cdef double s, diff
    with nogil:
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = A[i, k] - B[j, k]
                    s = s + diff * diff
                O[i, j] = sqrt(s / d)
    return out


def patched_pairwise(a, b, int reading):
    cdef double[:, :, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, :, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], P = A.shape[1], d = A.shape[2]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j, p, q, k
    cdef double s, diff, best, inner, v
    with nogil:
        for i in range(n):
            for j in range(m):
                best = 0.0
                for p in range(P):
                    if reading == 0:
                        s = 0.0
                        for k in range(d):
                            diff = A[i, p, k] - B[j, p, k]
                            s = s + diff * diff
                        v = sqrt(s / d)
                        if v > best:
                            best = v
                        continue
                    inner = 1e300
                    for q in range(P):
                        s = 0.0
                        for k in range(d):
                            diff = A[i, p, k] - B[j, q, k]
                            s = s + diff * diff
                        v = sqrt(s / d)
                        if reading == 2:
                            if v > best:
                                best = v
                        elif v < inner:
                            inner = v
                    if reading == 1 and inner > best:
                        best = inner
                O[i, j] = best
    return out


def masked_channel_means(x, mask):
    cdef double[:, :, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] M = np.ascontiguousarray(mask, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3]
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, ch, y, z
    cdef double s, msum = 0.0
    for y in range(h):
        for z in range(w):
            msum += M[y, z]
    with nogil:
        for i in range(n):
            for ch in range(c):
                s = 0.0
                for y in range(h):
                    for z in range(w):
                        s = s + M[y, z] * X[i, ch, y, z]
                O[i, ch] = s / msum
    return out


def count_at_most(values, thresholds):
    cdef double[::1] V = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] D = np.ascontiguousarray(thresholds, dtype=np.float64)
    cdef Py_ssize_t n = V.shape[0], k = D.shape[0], i, j
    out = np.zeros(k, dtype=np.int64)
    cdef cnp.int64_t[::1] O = out
    with nogil:
        for i in range(n):
            for j in range(k):
                if V[i] <= D[j]:
                    O[j] += 1
    return out
