"""Joint (weights, mask) training and the baselines it is compared against.

Weights and biases take momentum SGD steps; the mask takes a plain gradient
step on ``loss + lam * R(m)`` followed by projection onto [0, 1], with frozen
coordinates pinned at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import (
    LabeledDataset,
    LogisticArch,
    MaskedModel,
    RelaxedMask,
    accuracy,
    effective_grads,
    loss,
    mask_only_dataset,
    sigmoid,
)
from .numerics import NonFiniteError, clamp_box
from .regularizers import RegularizerSpec, reg_grad, reg_value

log = logging.getLogger(__name__)

HIST_BINS = 10


class TrainingDiverged(NonFiniteError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int | None = 128  # None -> full batch, no shuffling
    milestones: tuple = ()
    lr_decay: float = 0.1
    mask_lr_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epoch count must be non-negative")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if not self.mask_lr_scale > 0:
            raise ValueError("mask lr scale must be positive")
        object.__setattr__(self, "milestones", ms)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.milestones)

    def with_(self, **kw) -> "OptimConfig":
        return OptimConfig(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class SigmoidReparamConfig:
    beta_final: float = 200.0
    total_epochs: int = 10

    def __post_init__(self):
        if not self.beta_final > 0:
            raise ValueError("beta_final must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")

    def beta(self, t: int) -> float:
        """Exponential schedule beta_final ** (t / T): 1 at t=0, beta_final at t=T."""
        return float(self.beta_final ** (t / self.total_epochs))


@dataclass
class Trace:
    """Per-epoch record; index 0 holds the state before any update."""

    loss: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    histogram: list = field(default_factory=list)
    sign_flips: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    bias: float | None = None
    snapshots: dict = field(default_factory=dict)

    @property
    def objective_decreased(self) -> bool:
        return self.objective[-1] <= self.objective[0]


def mask_histogram(mask: RelaxedMask) -> list[int]:
    """Counts of unfrozen mask values in ten equal bins of [0, 1], then the frozen count."""
    free = mask.values[~mask.frozen]
    counts, _ = np.histogram(free, bins=HIST_BINS, range=(0.0, 1.0))
    return [int(c) for c in counts] + [int(mask.frozen.sum())]


def _batches(n: int, batch_size: int | None, seed: int, epoch: int):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def objective(model: MaskedModel, data: LabeledDataset, reg: RegularizerSpec | None, weight_l1: float = 0.0) -> float:
    value = loss(model, data)
    if reg is not None and reg.lam:
        value += reg.lam * reg_value(reg, model.mask.values)
    if weight_l1:
        value += weight_l1 * float(np.abs(model.weights).sum())
    return value


def _record(trace: Trace, model, data, reg, weight_l1, prev_sign):
    value = loss(model, data)
    trace.loss.append(value)
    if reg is not None and reg.lam:
        value += reg.lam * reg_value(reg, model.mask.values)
    if weight_l1:
        value += weight_l1 * float(np.abs(model.weights).sum())
    trace.objective.append(value)
    trace.accuracy.append(accuracy(model, data))
    trace.histogram.append(mask_histogram(model.mask))
    sign = np.sign(model.weights)
    if prev_sign is not None:
        trace.sign_flips.append(float(np.mean(sign != prev_sign)))
    return sign


def train_joint(
    model: MaskedModel,
    data: LabeledDataset,
    reg: RegularizerSpec | None,
    cfg: OptimConfig,
    *,
    train_mask: bool = True,
    train_weights: bool = True,
    weight_l1: float = 0.0,
    snapshot_epochs: tuple = (),
    mask_param: Callable | None = None,
) -> tuple[MaskedModel, Trace]:
    """Minimise ``loss(m * w) + lam * R(m)`` over (w, m, bias).

    ``weight_l1`` adds a sign-subgradient l1 penalty on the raw weights and
    ``train_mask=False`` keeps the mask fixed; together they give the
    weight-space baselines. The input model is not modified.
    ``mask_param`` is an internal hook used by the sigmoid baseline.
    """
    model = model.copy()
    mask = model.mask
    vel_w = np.zeros_like(model.weights)
    vel_b = np.zeros_like(model.bias)
    trace = Trace()
    prev_sign = _record(trace, model, data, reg, weight_l1, None)
    if 0 in snapshot_epochs:
        trace.snapshots[0] = (model.weights.copy(), model.bias.copy())

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        lr_m = lr * cfg.mask_lr_scale
        if mask_param is not None:
            mask_param.start_epoch(epoch, model)
        for b, idx in enumerate(_batches(data.n, cfg.batch_size, cfg.seed, epoch)):
            batch = data.subset(idx)
            g_eff, g_bias, value = effective_grads(model, batch)
            if not np.isfinite(value) or not np.all(np.isfinite(g_eff)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            # mask gradient uses the weights the loss was evaluated at
            g_mask = g_eff * model.weights
            if train_weights:
                g_w = g_eff * mask.values + cfg.weight_decay * model.weights
                if weight_l1:
                    g_w = g_w + weight_l1 * np.sign(model.weights)
                vel_w = cfg.momentum * vel_w + g_w
                model.weights -= lr * vel_w
                vel_b = cfg.momentum * vel_b + g_bias
                model.bias -= lr * vel_b
            if mask_param is not None:
                mask_param.step(g_mask, lr_m, model)
            elif train_mask:
                if reg is not None and reg.lam:
                    g_mask = g_mask + reg.lam * reg_grad(reg, mask.values)
                mask.values = clamp_box(mask.values - lr_m * g_mask)
                mask.values[mask.frozen] = 0.0
        prev_sign = _record(trace, model, data, reg, weight_l1, prev_sign)
        if not np.isfinite(trace.objective[-1]):
            raise TrainingDiverged(f"non-finite objective after epoch {epoch}")
        if epoch + 1 in snapshot_epochs:
            trace.snapshots[epoch + 1] = (model.weights.copy(), model.bias.copy())
    return model, trace


def subgrad_l1_weights(model: MaskedModel, data: LabeledDataset, lam: float, cfg: OptimConfig) -> tuple[MaskedModel, Trace]:
    """Weight-space l1 via the sign subgradient, mask held at all ones."""
    model = model.copy()
    model.mask = RelaxedMask.ones(model.weights.size)
    return train_joint(model, data, None, cfg, train_mask=False, weight_l1=lam)


class _SigmoidMask:
    """Drives mask = sigmoid(beta_t * s) inside train_joint."""

    def __init__(self, sig: SigmoidReparamConfig, frozen: np.ndarray):
        self.sig = sig
        self.frozen = frozen
        self.s = np.zeros(frozen.shape)
        self.beta = sig.beta(0)

    def _apply(self, model):
        vals = sigmoid(self.beta * self.s)
        vals[self.frozen] = 0.0
        model.mask.values = vals

    def start_epoch(self, epoch, model):
        self.beta = self.sig.beta(epoch)
        self._apply(model)

    def step(self, g_mask, lr, model):
        m = model.mask.values
        g_s = g_mask * self.beta * m * (1.0 - m)
        g_s[self.frozen] = 0.0
        self.s -= lr * g_s
        self._apply(model)

    def finish(self, model):
        self.beta = self.sig.beta(self.sig.total_epochs)
        self._apply(model)


def sigmoid_reparam_train(
    model: MaskedModel, data: LabeledDataset, cfg: OptimConfig, sig: SigmoidReparamConfig
) -> tuple[MaskedModel, Trace, np.ndarray]:
    """Continuous-sparsification baseline: mask = sigmoid(beta * s), s starts at 0.

    Returns the trained model (mask evaluated at the final beta), the trace
    and the latent scores ``s``.
    """
    model = model.copy()
    param = _SigmoidMask(sig, model.mask.frozen.copy())
    param._apply(model)
    model, trace = train_joint(model, data, None, cfg, mask_param=param)
    param.finish(model)
    return model, trace, param.s.copy()


# ---------------------------------------------------------------------------
# mask-only problems with fixed weights
# ---------------------------------------------------------------------------


def projected_gradient(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    m0,
    reg: RegularizerSpec,
    step: float,
    max_iter: int,
    tol: float = 0.0,
    frozen=None,
    extra0=None,
) -> tuple[np.ndarray, Trace] | tuple[np.ndarray, np.ndarray, Trace]:
    """Full-batch projected gradient descent on ``f(m) + lam * R(m)`` over [0, 1]^d.

    Stops when the projected-gradient residual
    ``||m - clamp(m - step * grad)||_inf`` drops below ``tol``.

    When ``extra0`` is given, ``fun_grad`` receives the concatenation of ``m``
    and these unconstrained, unregularised variables (e.g. a bias) and they
    are updated alongside; the return value then has three entries.
    """
    m = clamp_box(m0).copy()
    d = m.size
    frozen = np.zeros(d, bool) if frozen is None else np.asarray(frozen, bool)
    m[frozen] = 0.0
    extra = None if extra0 is None else np.atleast_1d(np.asarray(extra0, dtype=np.float64)).copy()
    trace = Trace()
    for it in range(max_iter + 1):
        f, g = fun_grad(m if extra is None else np.concatenate([m, extra]))
        g_extra = g[d:]
        g = g[:d]
        total = f + reg.lam * reg_value(reg, m) if reg.lam else f
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite objective at iteration {it}")
        trace.objective.append(total)
        trace.loss.append(f)
        if reg.lam:
            g = g + reg.lam * reg_grad(reg, m)
        g[frozen] = 0.0
        nxt = clamp_box(m - step * g)
        nxt[frozen] = 0.0
        residual = float(np.max(np.abs(nxt - m), initial=0.0))
        if extra is not None:
            residual = max(residual, step * float(np.max(np.abs(g_extra))))
        trace.residual.append(residual)
        if residual < tol or it == max_iter:
            break
        m = nxt
        if extra is not None:
            extra = extra - step * g_extra
    if extra is None:
        return m, trace
    return m, extra, trace


def pgd_mask_only(
    theta_hat,
    data: LabeledDataset,
    reg: RegularizerSpec,
    cfg: OptimConfig,
    *,
    bias: float = 0.0,
    train_bias: bool = False,
    l2: float = 0.0,
    m0=None,
    tol: float = 0.0,
) -> tuple[RelaxedMask, Trace]:
    """Select coordinates of fixed logistic weights ``theta_hat`` with a relaxed mask.

    Trains a unit-weight logistic model on ``X @ diag(theta_hat)``. The bias
    starts at ``bias`` and is only updated when ``train_bias`` is set; the
    final value is stored on the returned trace as ``trace.bias``. Step size
    is ``cfg.lr * cfg.mask_lr_scale`` and ``cfg.epochs`` bounds the number of
    full-batch iterations.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    Xt = data.with_features(mask_only_dataset(theta_hat, data.features))
    d = theta_hat.size
    unit = MaskedModel(LogisticArch(d), np.ones(d), np.array([bias]), RelaxedMask.ones(d), l2)

    def fun_grad(z):
        unit.mask.values = z[:d]
        if train_bias:
            unit.bias[0] = z[d]
        g_eff, g_bias, value = effective_grads(unit, Xt)
        return value, np.concatenate([g_eff, g_bias]) if train_bias else g_eff

    m0 = np.full(d, 0.5) if m0 is None else np.asarray(m0, dtype=np.float64)
    step = cfg.lr * cfg.mask_lr_scale
    if train_bias:
        m, b, trace = projected_gradient(fun_grad, m0, reg, step, cfg.epochs, tol, extra0=[bias])
        trace.bias = float(b[0])
    else:
        m, trace = projected_gradient(fun_grad, m0, reg, step, cfg.epochs, tol)
        trace.bias = float(bias)
    return RelaxedMask(m), trace


def lipschitz_logistic(X, l2: float = 0.0, iters: int = 200, seed: int = 0) -> float:
    """Upper bound ||X||_2^2 / (4N) + l2 on the gradient Lipschitz constant of mean logistic loss.

    ||X||_2 is estimated by power iteration on X^T X.
    """
    X = np.asarray(X, dtype=np.float64)
    v = np.random.Generator(np.random.Philox(seed)).normal(size=X.shape[1])
    v /= np.linalg.norm(v)
    sq = 0.0
    for _ in range(iters):
        u = X.T @ (X @ v)
        sq = float(np.linalg.norm(u))
        if sq == 0.0:
            break
        v = u / sq
    return sq / (4.0 * X.shape[0]) + l2
