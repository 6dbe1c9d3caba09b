"""Backend dispatch for the hot row kernels.

The compiled Cython core (``deltakd._kernels``) is preferred; the numpy
implementation (``deltakd._kernels_py``) is the fallback.  Force a choice
with ``DELTAKD_BACKEND=compiled`` or ``DELTAKD_BACKEND=python``.
"""
from __future__ import annotations

import os

_requested = os.environ.get("DELTAKD_BACKEND", "").strip().lower()

if _requested in ("", "compiled", "cython"):
    try:
        from deltakd import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        if _requested:
            raise
        from deltakd import _kernels_py as _impl

        BACKEND = "python"
elif _requested in ("python", "numpy"):
    from deltakd import _kernels_py as _impl

    BACKEND = "python"
else:
    raise RuntimeError(
        f"unknown DELTAKD_BACKEND {_requested!r}; expected 'compiled' or 'python'"
    )

logsumexp_rows = _impl.logsumexp_rows
softmax_rows = _impl.softmax_rows
log_softmax_rows = _impl.log_softmax_rows
kl_rows = _impl.kl_rows
nll_rows = _impl.nll_rows
shifted_target_rows = _impl.shifted_target_rows
lcs_length = _impl.lcs_length
