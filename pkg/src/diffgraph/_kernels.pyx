# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


def fnv1a64(bytes data):
    cdef const unsigned char[:] view = data
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(view.shape[0]):
        h ^= view[i]
        h *= FNV_PRIME
    return int(h)


def batch_rewards(shares, proj_outputs, proj_target, double tau):
    """Mean-of-metrics reward for many mixing-share vectors at once.

    Same contract as the numpy fallback: shares (G, n), proj_outputs
    (n, K, q), proj_target (K, q); returns (G,) float64.
    """
    cdef double[:, :] S = np.ascontiguousarray(shares, dtype=np.float64)
    cdef double[:, :, :] Y = np.ascontiguousarray(proj_outputs, dtype=np.float64)
    cdef double[:, :] T = np.ascontiguousarray(proj_target, dtype=np.float64)
    cdef Py_ssize_t G = S.shape[0], n = S.shape[1]
    cdef Py_ssize_t K = Y.shape[1], q = Y.shape[2]
    if Y.shape[0] != n or T.shape[0] != K or T.shape[1] != q:
        raise ValueError("batch_rewards: inconsistent shapes")
    out = np.empty(G, dtype=np.float64)
    cdef double[:] res = out
    cdef Py_ssize_t g, i, k, j
    cdef double acc, d, m, total
    for g in range(G):
        total = 0.0
        for k in range(K):
            acc = 0.0
            for j in range(q):
                m = -T[k, j]
                for i in range(n):
                    m += S[g, i] * Y[i, k, j]
                acc += m * m
            d = sqrt(acc)
            total += exp(-d / tau)
        res[g] = total / K
    return out
