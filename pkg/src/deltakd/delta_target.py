"""Synthetic target distributions built from the teacher's finetuning shift.

The canonical target reweights the finetuned teacher by the alpha-powered
ratio of the raw student to the raw teacher, then renormalizes per token
position.  The eight "parallel" variants re-assign the four model roles to
the (KL student, target base, shift pair) slots; a variant is tunable only
when the trainable role stays outside the shift term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltakd import kernels

# role labels: the four distributions available at a token position
SMALL_RAW = "small-raw"          # frozen pretrained student
SMALL_TRAINABLE = "small-trainable"  # the student being distilled
LARGE_RAW = "large-raw"          # frozen pretrained teacher
LARGE_FT = "large-ft"            # frozen finetuned teacher

ALL_ROLES = (SMALL_RAW, SMALL_TRAINABLE, LARGE_RAW, LARGE_FT)


class NonTunableVariantError(ValueError):
    """Requested a variant whose trainable role sits inside the shift term."""


@dataclass(frozen=True)
class RoleQuad:
    """Log-probability rows for the four roles, aligned on the last axis."""

    student_raw: np.ndarray
    teacher_raw: np.ndarray
    teacher_ft: np.ndarray
    student_trainable: np.ndarray

    def __post_init__(self):
        v = self.student_raw.shape[-1]
        for name in ("teacher_raw", "teacher_ft", "student_trainable"):
            row = getattr(self, name)
            if row.shape[-1] != v:
                raise ValueError(f"{name} vocabulary size {row.shape[-1]} != {v}")

    def row(self, role: str) -> np.ndarray:
        return {
            SMALL_RAW: self.student_raw,
            SMALL_TRAINABLE: self.student_trainable,
            LARGE_RAW: self.teacher_raw,
            LARGE_FT: self.teacher_ft,
        }[role]


@dataclass(frozen=True)
class VariantSpec:
    id: str
    kl_student_role: str
    target_base_role: str
    shift_minuend_role: str
    shift_subtrahend_role: str

    def __post_init__(self):
        roles = (
            self.kl_student_role,
            self.target_base_role,
            self.shift_minuend_role,
            self.shift_subtrahend_role,
        )
        if sorted(roles) != sorted(ALL_ROLES):
            raise ValueError(f"variant {self.id} does not use each role exactly once: {roles}")

    @property
    def tunable(self) -> bool:
        return classify_tunability(
            self.kl_student_role,
            self.target_base_role,
            self.shift_minuend_role,
            self.shift_subtrahend_role,
        )


def classify_tunability(
    kl_student_role: str,
    target_base_role: str,
    shift_minuend_role: str,
    shift_subtrahend_role: str,
) -> bool:
    """Tunable iff the trainable role is the KL student or the target base."""
    roles = (kl_student_role, target_base_role, shift_minuend_role, shift_subtrahend_role)
    if sorted(roles) != sorted(ALL_ROLES):
        raise ValueError(f"expected each role exactly once, got {roles}")
    return SMALL_TRAINABLE in (kl_student_role, target_base_role)


# V1..V8: (KL student, target base, shift minuend, shift subtrahend)
VARIANTS: dict[str, VariantSpec] = {
    "V1": VariantSpec("V1", SMALL_TRAINABLE, SMALL_RAW, LARGE_FT, LARGE_RAW),
    "V2": VariantSpec("V2", SMALL_TRAINABLE, LARGE_FT, SMALL_RAW, LARGE_RAW),
    "V3": VariantSpec("V3", LARGE_FT, LARGE_RAW, SMALL_TRAINABLE, SMALL_RAW),
    "V4": VariantSpec("V4", LARGE_FT, SMALL_TRAINABLE, LARGE_RAW, SMALL_RAW),
    "V5": VariantSpec("V5", SMALL_RAW, LARGE_RAW, SMALL_TRAINABLE, LARGE_FT),
    "V6": VariantSpec("V6", SMALL_RAW, SMALL_TRAINABLE, LARGE_RAW, LARGE_FT),
    "V7": VariantSpec("V7", LARGE_RAW, LARGE_FT, SMALL_RAW, SMALL_TRAINABLE),
    "V8": VariantSpec("V8", LARGE_RAW, SMALL_RAW, LARGE_FT, SMALL_TRAINABLE),
}


def variant_manifest() -> list[dict]:
    """Machine-readable variant table shared by CLI, docs, and tests."""
    return [
        {
            "id": spec.id,
            "kl_student": spec.kl_student_role,
            "target_base": spec.target_base_role,
            "shift_minuend": spec.shift_minuend_role,
            "shift_subtrahend": spec.shift_subtrahend_role,
            "tunable": spec.tunable,
        }
        for spec in VARIANTS.values()
    ]


def _check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    return float(alpha)


def _rows2d(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def delta_shift(numerator_log: np.ndarray, denominator_log: np.ndarray) -> np.ndarray:
    """Log-domain distribution shift: log p1 - log p2 (exp gives the ratio)."""
    if numerator_log.shape != denominator_log.shape:
        raise ValueError(
            f"shape mismatch: {numerator_log.shape} vs {denominator_log.shape}"
        )
    return numerator_log - denominator_log


def synth_target(quad: RoleQuad, alpha: float) -> np.ndarray:
    """Canonical synthetic target in the log domain.

    log pi* = log teacher_ft + alpha * (log student_raw - log teacher_raw) - log Z,
    normalized per row.  The result is a frozen reference: no gradient ever
    flows into it (see losses.delta_kd_loss).
    """
    alpha = _check_alpha(alpha)
    shape = np.asarray(quad.teacher_ft).shape
    out = kernels.shifted_target_rows(
        _rows2d(np.asarray(quad.teacher_ft, dtype=np.float64)),
        _rows2d(np.asarray(quad.student_raw, dtype=np.float64)),
        _rows2d(np.asarray(quad.teacher_raw, dtype=np.float64)),
        alpha,
    )
    return out.reshape(shape)


def parallel_target(
    spec: VariantSpec,
    quad: RoleQuad,
    alpha: float,
    *,
    allow_nontunable: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Target and KL-student rows for one parallel variant (no gradients).

    Gradient-aware evaluation lives in losses.parallel_loss; this function
    is the plain numpy form used for tests, telemetry, and the manifest.
    """
    alpha = _check_alpha(alpha)
    if not spec.tunable and not allow_nontunable:
        raise NonTunableVariantError(
            f"non-tunable variant {spec.id}: trainable role inside the shift term "
            "(pass allow_nontunable for diagnostics)"
        )
    base = np.asarray(quad.row(spec.target_base_role), dtype=np.float64)
    target = kernels.shifted_target_rows(
        _rows2d(base),
        _rows2d(np.asarray(quad.row(spec.shift_minuend_role), dtype=np.float64)),
        _rows2d(np.asarray(quad.row(spec.shift_subtrahend_role), dtype=np.float64)),
        alpha,
    ).reshape(base.shape)
    return target, np.asarray(quad.row(spec.kl_student_role), dtype=np.float64)
