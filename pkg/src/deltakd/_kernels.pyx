# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels over vocabulary-sized distributions.

Every function matches the signature and semantics of its pure-numpy twin
in ``deltakd._kernels_py``; the dispatcher in ``deltakd.kernels`` picks one
backend at import time.  Inputs are C-contiguous float64 arrays of shape
(n_rows, vocab) unless noted.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double _row_logsumexp(const double* row, Py_ssize_t v) noexcept nogil:
    cdef Py_ssize_t j
    cdef double m = row[0]
    cdef double acc = 0.0
    for j in range(1, v):
        if row[j] > m:
            m = row[j]
    for j in range(v):
        acc += exp(row[j] - m)
    return m + log(acc)


def logsumexp_rows(const double[:, ::1] x):
    """Row-wise max-shifted log(sum(exp(x)))."""
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = _row_logsumexp(&x[i, 0], v)
    return out_arr


def softmax_rows(const double[:, ::1] x, double inv_tau):
    """Row-wise softmax of x * inv_tau."""
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, acc, z
    for i in range(n):
        m = x[i, 0] * inv_tau
        for j in range(1, v):
            z = x[i, j] * inv_tau
            if z > m:
                m = z
        acc = 0.0
        for j in range(v):
            z = exp(x[i, j] * inv_tau - m)
            out[i, j] = z
            acc += z
        acc = 1.0 / acc
        for j in range(v):
            out[i, j] *= acc
    return out_arr


def log_softmax_rows(const double[:, ::1] x, double inv_tau):
    """Row-wise log-softmax of x * inv_tau."""
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, acc, z
    for i in range(n):
        m = x[i, 0] * inv_tau
        for j in range(1, v):
            z = x[i, j] * inv_tau
            if z > m:
                m = z
        acc = 0.0
        for j in range(v):
            z = x[i, j] * inv_tau - m
            out[i, j] = z
            acc += exp(z)
        acc = log(acc)
        for j in range(v):
            out[i, j] -= acc
    return out_arr


def kl_rows(const double[:, ::1] p_log, const double[:, ::1] q_log):
    """Row-wise KL(p || q) in nats from log-domain rows.

    Entries with p_log == -inf (zero mass) contribute nothing.
    """
    cdef Py_ssize_t n = p_log.shape[0], v = p_log.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc, pl
    for i in range(n):
        acc = 0.0
        for j in range(v):
            pl = p_log[i, j]
            if pl > -INFINITY:
                acc += exp(pl) * (pl - q_log[i, j])
        out[i] = acc
    return out_arr


def nll_rows(const double[:, ::1] log_probs, const long long[::1] targets):
    """Per-row negative log-likelihood of the target token."""
    cdef Py_ssize_t n = log_probs.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = -log_probs[i, targets[i]]
    return out_arr


def shifted_target_rows(const double[:, ::1] base_log,
                        const double[:, ::1] minuend_log,
                        const double[:, ::1] subtrahend_log,
                        double alpha):
    """Normalized log target: base + alpha * (minuend - subtrahend) - log Z."""
    cdef Py_ssize_t n = base_log.shape[0], v = base_log.shape[1]
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, acc, u
    for i in range(n):
        m = -INFINITY
        for j in range(v):
            u = base_log[i, j] + alpha * (minuend_log[i, j] - subtrahend_log[i, j])
            out[i, j] = u
            if u > m:
                m = u
        acc = 0.0
        for j in range(v):
            acc += exp(out[i, j] - m)
        acc = m + log(acc)
        for j in range(v):
            out[i, j] -= acc
    return out_arr


def lcs_length(const long long[::1] a, const long long[::1] b):
    """Longest-common-subsequence length between two token-id sequences."""
    cdef Py_ssize_t la = a.shape[0], lb = b.shape[0]
    if la == 0 or lb == 0:
        return 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] prev_arr = np.zeros(lb + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cur_arr = np.zeros(lb + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_arr
    cdef long long[::1] cur = cur_arr
    cdef long long[::1] tmp
    cdef Py_ssize_t i, j
    for i in range(la):
        for j in range(lb):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[lb])
