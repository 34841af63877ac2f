# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t

cnp.import_array()


def meter_run(const int64_t[:] times, const int64_t[:] need, int64_t rate, int64_t cap,
              int64_t credits, int64_t last):
    cdef Py_ssize_t n = times.shape[0], i
    cdef cnp.ndarray[uint8_t, ndim=1] mask = np.zeros(n, dtype=np.uint8)
    cdef int64_t t, room
    for i in range(n):
        t = times[i]
        if t > last:
            room = cap - credits
            # avoid overflow on long idle gaps
            if rate > 0 and (t - last) >= room // rate + 1:
                credits = cap
            else:
                credits = credits + rate * (t - last)
                if credits > cap:
                    credits = cap
            last = t
        if credits >= need[i]:
            credits -= need[i]
            mask[i] = 1
    return mask, credits, last


def amm_run(const uint8_t[:] colors, int64_t n_a, int64_t n_b, int64_t last):
    cdef Py_ssize_t n = colors.shape[0], i, k = 0
    cdef cnp.ndarray[int64_t, ndim=1] pos = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] counter = np.empty(n, dtype=np.int64)
    cdef int64_t c
    for i in range(n):
        c = colors[i]
        if last != -1 and c != last:
            pos[k] = i
            counter[k] = n_a if last == 0 else n_b
            k += 1
        if c == 0:
            n_a += 1
        else:
            n_b += 1
        last = c
    return n_a, n_b, last, pos[:k].copy(), counter[:k].copy()


def admit_run(const int64_t[:] sizes, int64_t budget):
    cdef Py_ssize_t n = sizes.shape[0], i
    cdef cnp.ndarray[uint8_t, ndim=1] mask = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        if sizes[i] <= budget:
            budget -= sizes[i]
            mask[i] = 1
    return mask, budget
