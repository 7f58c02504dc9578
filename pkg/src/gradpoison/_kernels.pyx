# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Must stay value-compatible with ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def pairwise_sq_dists(const double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] D = out
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    diff = X[j, k] - X[i, k]
                    acc += diff * diff
                D[i, j] = acc
                D[j, i] = acc
    return out


def im2col(const double[:, :, :, ::1] x, Py_ssize_t K, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - K) // stride + 1
    cdef Py_ssize_t Wo = (W - K) // stride + 1
    cdef Py_ssize_t b, c, ki, kj, oi, oj, col
    out = np.empty((B, Ho * Wo, C * K * K), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    with nogil:
        for b in range(B):
            for oi in range(Ho):
                for oj in range(Wo):
                    col = 0
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                cols[b, oi * Wo + oj, col] = x[b, c, oi * stride + ki, oj * stride + kj]
                                col += 1
    return out


def col2im(const double[:, :, ::1] cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           Py_ssize_t K, Py_ssize_t stride):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Ho = (H - K) // stride + 1
    cdef Py_ssize_t Wo = (W - K) // stride + 1
    cdef Py_ssize_t b, c, ki, kj, oi, oj
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    # accumulation order per pixel is (ki, kj) lexicographic, same as the fallback
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(K):
                    for kj in range(K):
                        for oi in range(Ho):
                            for oj in range(Wo):
                                x[b, c, oi * stride + ki, oj * stride + kj] += \
                                    cols[b, oi * Wo + oj, (c * K + ki) * K + kj]
    return out
