# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot-path kernels.

Same contract as ``tinyqat.kernels.fallback``; every arithmetic step runs in
the same order on the same float64 values so results match the fallback bit
for bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport rint

cnp.import_array()


def quantize_values(double[::1] x, double s, double q_n, double q_p):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double c
    for i in range(n):
        c = x[i] / s
        if c < -q_n:
            c = -q_n
        elif c > q_p:
            c = q_p
        ov[i] = rint(c) * s
    return out


def quantize_parts(double[::1] x, double s, double q_n, double q_p):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    ind = np.empty(n, dtype=np.float64)
    sg = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out, iv = ind, sv = sg
    cdef double v, c, r
    for i in range(n):
        v = x[i] / s
        c = v
        if c < -q_n:
            c = -q_n
        elif c > q_p:
            c = q_p
        r = rint(c)
        ov[i] = r * s
        iv[i] = 1.0 if (v >= -q_n and v <= q_p) else 0.0
        if v <= -q_n:
            sv[i] = -q_n
        elif v >= q_p:
            sv[i] = q_p
        else:
            sv[i] = r - v
    return out, ind, sg


def int_levels(double[::1] x, double s, double q_n, double q_p):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef double c
    for i in range(n):
        c = x[i] / s
        if c < -q_n:
            c = -q_n
        elif c > q_p:
            c = q_p
        ov[i] = <cnp.int64_t> rint(c)
    return out


def oscillation_step(cnp.int64_t[::1] cur, cnp.int64_t[::1] prev_int,
                     cnp.int8_t[::1] prev_dir, double[::1] freq,
                     double momentum):
    cdef Py_ssize_t i, n = cur.shape[0]
    events = np.zeros(n, dtype=np.bool_)
    cdef cnp.uint8_t[::1] ev = events.view(np.uint8)
    cdef cnp.int64_t delta
    cdef cnp.int8_t d
    cdef double o
    for i in range(n):
        delta = cur[i] - prev_int[i]
        if delta != 0:
            d = 1 if delta > 0 else -1
            o = 1.0 if (prev_dir[i] != 0 and d != prev_dir[i]) else 0.0
            ev[i] = o != 0.0
            freq[i] = momentum * o + (1.0 - momentum) * freq[i]
            prev_dir[i] = d
            prev_int[i] = cur[i]
        else:
            freq[i] = momentum * 0.0 + (1.0 - momentum) * freq[i]
    return events


def bin_moments(cnp.int64_t[::1] idx, double[::1] w, Py_ssize_t nbins):
    cdef Py_ssize_t i, n = w.shape[0]
    counts = np.zeros(nbins, dtype=np.int64)
    sums = np.zeros(nbins, dtype=np.float64)
    m2 = np.zeros(nbins, dtype=np.float64)
    means = np.zeros(nbins, dtype=np.float64)
    variances = np.zeros(nbins, dtype=np.float64)
    cdef cnp.int64_t[::1] cv = counts
    cdef double[::1] sv = sums, mv = means, qv = m2, vv = variances
    cdef double dev
    for i in range(n):
        cv[idx[i]] += 1
        sv[idx[i]] += w[i]
    for i in range(nbins):
        mv[i] = sv[i] / (cv[i] if cv[i] > 1 else 1)
    for i in range(n):
        dev = w[i] - mv[idx[i]]
        qv[idx[i]] += dev * dev
    for i in range(nbins):
        vv[i] = qv[i] / (cv[i] if cv[i] > 1 else 1)
    return counts, means, variances
