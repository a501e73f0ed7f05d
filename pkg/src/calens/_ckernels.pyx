# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror calens._pykernels exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def mean_max_softmax(const double[:, ::1] scores, double inv_t):
    cdef Py_ssize_t n = scores.shape[0], k = scores.shape[1]
    cdef Py_ssize_t i, j
    cdef double row_max, denom, total = 0.0
    if n == 0:
        raise ValueError("empty score matrix")
    with nogil:
        for i in range(n):
            row_max = scores[i, 0]
            for j in range(1, k):
                if scores[i, j] > row_max:
                    row_max = scores[i, j]
            denom = 0.0
            for j in range(k):
                denom += exp((scores[i, j] - row_max) * inv_t)
            total += 1.0 / denom
    return total / n


def combiner_errors(const double[::1] mass, const double[:, ::1] cond, Py_ssize_t start, Py_ssize_t stop):
    cdef Py_ssize_t n_cells = mass.shape[0], k = cond.shape[1]
    cdef Py_ssize_t idx, c, rem
    cdef double err
    out = np.empty(stop - start, dtype=np.float64)
    cdef double[::1] out_v = out
    with nogil:
        for idx in range(start, stop):
            rem = idx
            err = 0.0
            for c in range(n_cells):
                err += mass[c] * (1.0 - cond[c, rem % k])
                rem = rem // k
            out_v[idx - start] = err
    return out
