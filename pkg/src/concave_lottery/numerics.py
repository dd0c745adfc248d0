"""Dense float64 helpers, seeded randomness and a central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def as_vector(v, name: str = "v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(A, name: str = "A") -> np.ndarray:
    arr = np.asarray(A, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Return a generator backed by the counter-based Philox bit generator.

    Philox output depends only on (key, counter), so a given seed produces the
    same stream on every platform and numpy build.
    """
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def matvec(A, v) -> np.ndarray:
    A = as_matrix(A)
    v = as_vector(v)
    if A.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply matrix of shape {A.shape} by vector of shape {v.shape}")
    return A @ v


def clamp_box(v) -> np.ndarray:
    """Euclidean projection onto the unit box [0, 1]^d."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("clamp_box received non-finite entries")
    return np.clip(v, 0.0, 1.0)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = as_vector(x, "x").copy()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(|b|, floor), a scale-aware comparison for gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / denom
