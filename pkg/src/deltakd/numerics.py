"""Numerically stable primitives over vocabulary-sized distributions.

All distribution algebra in this package is carried in the log domain
(float64) and exponentiated only at boundaries.  Batched application over
many rows goes through :mod:`deltakd.kernels`; the functions here are the
single-row reference surface.
"""
from __future__ import annotations

import numpy as np

from deltakd import kernels


def _as_row(values, name: str) -> np.ndarray:
    row = np.asarray(values, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {row.shape}")
    return row


def _require_finite(row: np.ndarray, name: str) -> None:
    if not np.isfinite(row).all():
        raise ValueError(f"{name} contains non-finite entries")


def check_prob_row(values, tol: float = 1e-9) -> np.ndarray:
    """Validate a probability row: entries >= 0, sum within tol of 1."""
    row = _as_row(values, "probability row")
    if row.size < 2:
        raise ValueError("probability row needs vocabulary size >= 2")
    if (row < 0).any():
        raise ValueError("probability row has negative entries")
    total = row.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"probability row sums to {total!r}, not 1 within {tol}")
    return row

def check_log_prob_row(values, tol: float = 1e-9) -> np.ndarray:
    """Validate a log-probability row: entries <= 0 (within tol), lse == 0 within tol."""
    row = _as_row(values, "log-probability row")
    if row.size < 2:
        raise ValueError("log-probability row needs vocabulary size >= 2")
    if (row > tol).any():
        raise ValueError("log-probability row has entries above 0")
    lse = log_sum_exp(row[np.isfinite(row)]) if np.isneginf(row).any() else log_sum_exp(row)
    if abs(lse) > tol:
        raise ValueError(f"log-probability row normalizes to lse={lse!r}, not 0 within {tol}")
    return row


def log_sum_exp(values) -> float:
    """max-shifted log(sum(exp(values))); never overflows for finite input."""
    row = _as_row(values, "log_sum_exp input")
    if row.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    _require_finite(row, "log_sum_exp input")
    return float(kernels.logsumexp_rows(np.ascontiguousarray(row[None, :]))[0])


def temp_softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax exp(z/tau) / sum(exp(z/tau)), computed via max shift."""
    row = _as_row(logits, "logits")
    _require_finite(row, "logits")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau!r}")
    return kernels.softmax_rows(np.ascontiguousarray(row[None, :]), 1.0 / tau)[0]


def log_softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Log-domain temperature softmax; exp of the result equals temp_softmax."""
    row = _as_row(logits, "logits")
    _require_finite(row, "logits")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau!r}")
    return kernels.log_softmax_rows(np.ascontiguousarray(row[None, :]), 1.0 / tau)[0]


def kl_divergence(p, q_log, *, p_is_log: bool = False) -> float:
    """KL(p || q) in nats; q given as a log-probability row.

    ``p`` is a probability row by default, or a log-probability row when
    ``p_is_log`` is set.  Zero-mass entries of p contribute nothing.
    """
    p_row = _as_row(p, "p")
    q_row = _as_row(q_log, "q_log")
    if p_row.shape != q_row.shape:
        raise ValueError(f"length mismatch: p has {p_row.shape}, q has {q_row.shape}")
    if p_is_log:
        p_log = p_row
    else:
        with np.errstate(divide="ignore"):
            p_log = np.log(p_row)
    return float(
        kernels.kl_rows(
            np.ascontiguousarray(p_log[None, :]),
            np.ascontiguousarray(q_row[None, :]),
        )[0]
    )


def cross_entropy(target_token: int, log_probs) -> float:
    """Negative log-probability of the target token id."""
    row = _as_row(log_probs, "log_probs")
    if not 0 <= target_token < row.size:
        raise ValueError(f"target token {target_token} out of range [0, {row.size})")
    return float(-row[target_token])
