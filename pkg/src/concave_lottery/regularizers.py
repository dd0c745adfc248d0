"""Separable concave sparsity penalties on the unit box.

Each penalty is ``R(m) = sum_i r(m_i)`` where ``r`` maps [0, 1] onto [0, 1],
is concave and non-decreasing, with ``r(0) = 0`` and ``r(1) = 1``. Two members
are provided:

* ``l1``:  ``r(t) = t``
* ``log``: ``r(t) = log((t + eps) / eps) / log((1 + eps) / eps)``

Further penalties (l_q, minimax concave) would plug in by adding a kind and
the matching scalar value/derivative pair below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 0.1
DEFAULT_LAMBDA = {"l1": 3e-6, "log": 1e-6}

KINDS = ("l1", "log")


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "log"
    lam: float = DEFAULT_LAMBDA["log"]
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.kind == "log" and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive for the log penalty, got {self.epsilon}")

    @classmethod
    def default(cls, kind: str) -> "RegularizerSpec":
        return cls(kind=kind, lam=DEFAULT_LAMBDA[kind])

    @property
    def strictly_concave(self) -> bool:
        return self.kind == "log"

    def with_lambda(self, lam: float) -> "RegularizerSpec":
        return RegularizerSpec(self.kind, lam, self.epsilon)


def _check_box(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("mask contains non-finite values")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError(
            f"mask values must lie in [0, 1] (got range [{m.min():.6g}, {m.max():.6g}]); clamp first"
        )
    return m


def _log_norm(eps: float) -> float:
    return math.log1p(1.0 / eps)


def reg_scalar(spec: RegularizerSpec, m_i):
    """Per-coordinate penalty r(m_i). Accepts a scalar or an array."""
    m = _check_box(m_i)
    if spec.kind == "l1":
        out = m.copy()
    else:
        # log1p keeps precision for m << eps
        out = np.log1p(m / spec.epsilon) / _log_norm(spec.epsilon)
    return float(out) if out.ndim == 0 else out


def reg_value(spec: RegularizerSpec, m) -> float:
    return float(np.sum(reg_scalar(spec, np.asarray(m, dtype=np.float64).ravel())))


def reg_grad(spec: RegularizerSpec, m) -> np.ndarray:
    """Gradient of R. At 0 and 1 the one-sided derivative is returned."""
    m = _check_box(m)
    if spec.kind == "l1":
        return np.ones_like(m)
    return 1.0 / ((m + spec.epsilon) * _log_norm(spec.epsilon))


def phi_gap(spec: RegularizerSpec, m) -> float:
    """R(m) - ||m||_1, non-negative on the box and zero at binary points."""
    m = _check_box(m)
    if spec.kind == "l1":
        return 0.0
    gap = float(np.sum(reg_scalar(spec, m.ravel()) - m.ravel()))
    # r(t) >= t holds exactly; only rounding can push the sum below zero
    return max(gap, 0.0)
