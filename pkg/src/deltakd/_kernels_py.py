"""Pure-numpy fallback for the row kernels in ``deltakd._kernels``.

Same functions, same shapes, same semantics; used when the compiled
extension is unavailable or when ``DELTAKD_BACKEND=python`` is set.
"""
from __future__ import annotations

import numpy as np


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def softmax_rows(x: np.ndarray, inv_tau: float) -> np.ndarray:
    z = x * inv_tau
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def log_softmax_rows(x: np.ndarray, inv_tau: float) -> np.ndarray:
    z = x * inv_tau
    z -= z.max(axis=1, keepdims=True)
    z -= np.log(np.exp(z).sum(axis=1, keepdims=True))
    return z


def kl_rows(p_log: np.ndarray, q_log: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        terms = np.exp(p_log) * (p_log - q_log)
    terms[np.isneginf(p_log)] = 0.0
    return terms.sum(axis=1)


def nll_rows(log_probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return -log_probs[np.arange(log_probs.shape[0]), targets]


def shifted_target_rows(
    base_log: np.ndarray,
    minuend_log: np.ndarray,
    subtrahend_log: np.ndarray,
    alpha: float,
) -> np.ndarray:
    u = base_log + alpha * (minuend_log - subtrahend_log)
    return u - logsumexp_rows(u)[:, None]


def lcs_length(a: np.ndarray, b: np.ndarray) -> int:
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        return 0
    prev = np.zeros(lb + 1, dtype=np.int64)
    for i in range(la):
        # vectorized DP row update: match/extend then running-max carry
        cur = np.maximum(prev[1:], np.where(b == a[i], prev[:-1] + 1, 0))
        np.maximum.accumulate(cur, out=cur)
        prev[1:] = cur
    return int(prev[lb])
