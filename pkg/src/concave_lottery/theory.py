"""Planted strongly convex mask problems and error-bound certificates.

A planted instance has a binary target mask ``m_bar`` with support size k and
the separable quadratic loss

    L(m) = (gamma / 2) ||m - m_bar||^2 + g^T (m - m_bar),   ||g||_inf <= lam

so ``grad L(m_bar) = g`` and the loss is gamma-strongly convex everywhere.
For such instances the regularised minimiser over the unit box can be found
exactly (closed form for l1, exhaustive 1-D search per coordinate otherwise),
and the distance ``||m* - m_bar||_2`` can be compared with ``4 lam sqrt(k) / gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import clamp_box
from .optim import projected_gradient
from .regularizers import RegularizerSpec, phi_gap, reg_scalar

SLACK = 1e-9
MAX_GRID_POINTS = 10_000_000


class GridTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class PlantedInstance:
    m_bar: np.ndarray
    gamma: float
    g: np.ndarray
    lam: float

    @property
    def d(self) -> int:
        return self.m_bar.size

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.m_bar))

    def loss(self, m) -> float:
        h = np.asarray(m, dtype=np.float64) - self.m_bar
        return float(0.5 * self.gamma * h @ h + self.g @ h)

    def loss_grad(self, m) -> np.ndarray:
        return self.gamma * (np.asarray(m, dtype=np.float64) - self.m_bar) + self.g

    def objective(self, m, reg: RegularizerSpec) -> float:
        return self.loss(m) + reg.lam * float(np.sum(reg_scalar(reg, np.asarray(m, dtype=np.float64))))


def make_planted(d: int, k: int, gamma: float, lam: float, rng: np.random.Generator, zero_gradient: bool = False) -> PlantedInstance:
    if not 1 <= k <= d:
        raise ValueError(f"support size must satisfy 1 <= k <= d, got k={k}, d={d}")
    if not (gamma > 0 and lam > 0):
        raise ValueError("gamma and lambda must be positive")
    m_bar = np.zeros(d)
    m_bar[np.sort(rng.choice(d, size=k, replace=False))] = 1.0
    g = np.zeros(d) if zero_gradient else rng.uniform(-lam, lam, size=d)
    return PlantedInstance(m_bar, float(gamma), g, float(lam))


def solve_relaxed_l1_closed_form(inst: PlantedInstance, lam: float) -> np.ndarray:
    """Exact minimiser of L(m) + lam * ||m||_1 over [0, 1]^d.

    The objective splits into 1-D convex quadratics whose unconstrained
    minimisers m_bar_i - (g_i + lam) / gamma are projected onto [0, 1].
    """
    return clamp_box(inst.m_bar - (inst.g + lam) / inst.gamma)


def _grid(q: float) -> np.ndarray:
    steps = round(1.0 / q)
    if steps < 1 or abs(steps * q - 1.0) > 1e-9:
        raise ValueError(f"grid step {q} does not divide 1 evenly")
    return np.arange(steps + 1) / steps


def grid_minimize(fun: Callable[[np.ndarray], float], d: int, q: float) -> np.ndarray:
    """Brute-force minimum of ``fun`` over {0, q, ..., 1}^d for non-separable objectives."""
    axis = _grid(q)
    cost = axis.size**d
    if cost > MAX_GRID_POINTS:
        raise GridTooLarge(f"grid search over {axis.size}^{d} = {cost:.3g} points exceeds the {MAX_GRID_POINTS:.0e} cap")
    best, best_val = None, math.inf
    for idx in np.ndindex(*(axis.size,) * d):
        m = axis[list(idx)]
        val = fun(m)
        if val < best_val:
            best, best_val = m, val
    return best


def solve_relaxed_grid(inst: PlantedInstance, reg: RegularizerSpec, q: float = 0.01) -> np.ndarray:
    """Exhaustive minimiser of L + lam * R over the grid {0, q, ..., 1}^d.

    Both L and R are separable, so the product-grid minimum is the vector of
    per-coordinate grid minima; this is exact, not a heuristic.
    """
    axis = _grid(q)
    r = reg_scalar(reg, axis)
    # objective table: rows are coordinates, columns are grid values
    h = axis[None, :] - inst.m_bar[:, None]
    table = 0.5 * inst.gamma * h**2 + inst.g[:, None] * h + reg.lam * r[None, :]
    return axis[np.argmin(table, axis=1)]


def solve_pgd(inst: PlantedInstance, reg: RegularizerSpec, m0=None, tol: float = 1e-12, max_iter: int = 100_000,
              step: float | None = None) -> np.ndarray:
    """Projected gradient descent on the planted objective (step 1 / (2 gamma) by default)."""
    m0 = np.full(inst.d, 0.5) if m0 is None else m0

    def fun_grad(m):
        return inst.loss(m), inst.loss_grad(m)

    m, _ = projected_gradient(fun_grad, m0, reg, step or 0.5 / inst.gamma, max_iter, tol)
    return m


def solve_relaxed(inst: PlantedInstance, reg: RegularizerSpec, q: float = 0.01) -> np.ndarray:
    """Closed form for l1; grid search refined by PGD for strictly concave penalties."""
    if reg.kind == "l1":
        return solve_relaxed_l1_closed_form(inst, reg.lam)
    start = solve_relaxed_grid(inst, reg, q)
    refined = solve_pgd(inst, reg, m0=start)
    return refined if inst.objective(refined, reg) <= inst.objective(start, reg) else start


@dataclass(frozen=True)
class BoundCertificate:
    lam: float
    k: int
    gamma: float
    error: float
    bound: float
    phi: float
    bound_holds: bool
    reduced_holds: bool | None
    recovery_applicable: bool
    recovery_holds: bool | None

    @property
    def reduced_bound(self) -> float:
        return self.bound - self.phi

    CSV_HEADER = (
        "lambda", "k", "gamma", "error_l2", "bound", "phi", "reduced_bound",
        "bound_holds", "reduced_holds", "recovery_applicable", "recovery_holds",
    )

    def row(self) -> list[str]:
        def flag(v):
            return "" if v is None else str(int(v))

        return [
            f"{self.lam:.10g}", str(self.k), f"{self.gamma:.10g}", f"{self.error:.10g}",
            f"{self.bound:.10g}", f"{self.phi:.10g}", f"{self.reduced_bound:.10g}",
            flag(self.bound_holds), flag(self.reduced_holds), flag(self.recovery_applicable), flag(self.recovery_holds),
        ]


def error_bound(lam: float, k: int, gamma: float) -> float:
    return 4.0 * lam * math.sqrt(k) / gamma


def certify(inst: PlantedInstance, reg: RegularizerSpec, m_star) -> BoundCertificate:
    m_star = np.asarray(m_star, dtype=np.float64)
    if m_star.shape != inst.m_bar.shape:
        raise ValueError(f"m_star has shape {m_star.shape}, expected {inst.m_bar.shape}")
    if not np.all(np.isfinite(m_star)) or m_star.min() < -SLACK or m_star.max() > 1 + SLACK:
        raise ValueError("m_star is not feasible for the unit box")
    m_star = np.clip(m_star, 0.0, 1.0)
    error = float(np.linalg.norm(m_star - inst.m_bar))
    bound = error_bound(reg.lam, inst.k, inst.gamma)
    phi = phi_gap(reg, m_star)
    reduced = error <= bound - phi + SLACK if reg.strictly_concave else None
    binary = bool(np.all(np.minimum(np.abs(m_star), np.abs(m_star - 1.0)) <= SLACK))
    applicable = bound < 1.0 and binary
    recovered = bool(np.all(np.abs(m_star - inst.m_bar) <= SLACK)) if applicable else None
    return BoundCertificate(
        lam=reg.lam, k=inst.k, gamma=inst.gamma, error=error, bound=bound, phi=phi,
        bound_holds=error <= bound + SLACK, reduced_holds=reduced,
        recovery_applicable=applicable, recovery_holds=recovered,
    )


def random_instance(rng: np.random.Generator, d_range=(2, 12), gamma_range=(0.5, 4.0), lam_range=(0.01, 0.5)) -> PlantedInstance:
    d = int(rng.integers(d_range[0], d_range[1] + 1))
    k = int(rng.integers(1, d + 1))
    gamma = float(rng.uniform(*gamma_range))
    lam = float(rng.uniform(*lam_range))
    return make_planted(d, k, gamma, lam, rng)
