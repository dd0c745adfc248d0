"""Rounds of rewind / train / prune, the pruning rules, and ticket evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import LabeledDataset, MaskedModel, RelaxedMask, accuracy
from .optim import (
    OptimConfig,
    SigmoidReparamConfig,
    mask_histogram,
    sigmoid_reparam_train,
    train_joint,
)
from .regularizers import RegularizerSpec

STRATEGIES = ("threshold", "hard", "imp", "sigmoid")


class RoundFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    arch: object
    weights: np.ndarray
    bias: np.ndarray
    tag: str = "initialization"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.atleast_1d(np.array(self.bias, dtype=np.float64))
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def of(cls, model: MaskedModel, tag: str = "initialization") -> "Checkpoint":
        return cls(model.arch, model.weights, model.bias, tag)

    def model(self, mask: RelaxedMask | None = None, l2: float = 0.0) -> MaskedModel:
        return MaskedModel(self.arch, self.weights, self.bias, mask, l2)


@dataclass(frozen=True)
class LotteryConfig:
    rounds: int = 3
    alpha: float = 0.02
    optim: OptimConfig = field(default_factory=OptimConfig)
    reg: RegularizerSpec = field(default_factory=lambda: RegularizerSpec.default("log"))
    strategy: str = "threshold"
    prune_fraction: float = 0.2  # per-round fraction for the hard, imp and sigmoid strategies
    rewind_epoch: int | None = None
    allow_regrowth: bool = False
    beta_final: float = 200.0
    l2: float = 0.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("at least one round is required")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy != "threshold" and not 0.0 < self.prune_fraction < 1.0:
            raise ValueError(f"prune fraction must lie in (0, 1), got {self.prune_fraction}")
        if self.rewind_epoch is not None and not 0 <= self.rewind_epoch <= self.optim.epochs:
            raise ValueError("rewind epoch must fall inside the first round")


@dataclass
class RoundReport:
    round: int
    survivors: int
    sparsity: float
    val_accuracy: float
    objective: float
    histogram: list

    CSV_HEADER = ("round", "survivors", "sparsity", "val_accuracy", "objective", "histogram")

    def row(self) -> list[str]:
        return [
            str(self.round),
            str(self.survivors),
            f"{self.sparsity:.6f}",
            f"{self.val_accuracy:.6f}",
            f"{self.objective:.10g}",
            " ".join(str(c) for c in self.histogram),
        ]


@dataclass
class LotteryResult:
    mask: RelaxedMask
    reports: list
    model: MaskedModel
    rewind: Checkpoint


# ---------------------------------------------------------------------------
# pruning rules
# ---------------------------------------------------------------------------


def threshold_prune(mask: RelaxedMask, alpha: float) -> RelaxedMask:
    """Zero and freeze every coordinate whose value is strictly below ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    out = mask.copy()
    drop = out.values < alpha
    out.values[drop] = 0.0
    out.frozen |= drop
    return out


def _smallest_unfrozen(scores: np.ndarray, frozen: np.ndarray, count: int) -> np.ndarray:
    pool = np.flatnonzero(~frozen)
    # stable sort on the ascending pool keeps the lowest index first among ties
    order = np.argsort(scores[pool], kind="stable")
    return pool[order[:count]]


def hard_prune(mask: RelaxedMask, p: float) -> RelaxedMask:
    """Freeze the floor(p * n_unfrozen) unfrozen coordinates with the smallest values."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {p}")
    n_free = int(np.count_nonzero(~mask.frozen))
    count = math.floor(p * n_free + 1e-9)
    out = mask.copy()
    idx = _smallest_unfrozen(out.values, out.frozen, count)
    out.values[idx] = 0.0
    out.frozen[idx] = True
    return out


def imp_prune(weights, mask, p: float) -> np.ndarray:
    """One magnitude-pruning step: drop the ceil(p * survivors) smallest |w| survivors.

    ``mask`` is binary (array or RelaxedMask); the returned mask is a 0/1 float array.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {p}")
    m = mask.values if isinstance(mask, RelaxedMask) else np.asarray(mask, dtype=np.float64)
    alive = m != 0.0
    w = np.abs(np.asarray(weights, dtype=np.float64) * m)
    count = math.ceil(p * int(alive.sum()) - 1e-9)
    idx = _smallest_unfrozen(w, ~alive, count)
    out = alive.astype(np.float64)
    out[idx] = 0.0
    return out


def matched_fraction(sparsity: float, rounds: int) -> float:
    """Per-round fraction p with 1 - (1 - p)^rounds = sparsity."""
    return 1.0 - (1.0 - sparsity) ** (1.0 / rounds)


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------


def run_lottery(
    init: Checkpoint,
    train: LabeledDataset,
    val: LabeledDataset,
    cfg: LotteryConfig,
) -> LotteryResult:
    """Soft-mask pruning with concave regularisation, or one of its ablations.

    Each round rewinds the weights to the checkpoint, trains (w, m) jointly
    starting from the previous round's mask and prunes. The first round starts
    from m = 1/2 (all ones for IMP).
    """
    d = init.weights.size
    if cfg.strategy == "imp":
        mask = RelaxedMask.ones(d)
    else:
        mask = RelaxedMask.full(d, 0.5)
    rewind = init
    reports = []
    model = None
    for t in range(1, cfg.rounds + 1):
        model = rewind.model(mask.copy(), cfg.l2)
        snaps = (cfg.rewind_epoch,) if (t == 1 and cfg.rewind_epoch and cfg.strategy != "sigmoid") else ()
        try:
            if cfg.strategy == "imp":
                model, trace = train_joint(model, train, None, cfg.optim, train_mask=False, snapshot_epochs=snaps)
            elif cfg.strategy == "sigmoid":
                sig = SigmoidReparamConfig(cfg.beta_final, max(cfg.optim.epochs, 1))
                model, trace, _ = sigmoid_reparam_train(model, train, cfg.optim, sig)
            else:
                model, trace = train_joint(model, train, cfg.reg, cfg.optim, snapshot_epochs=snaps)
        except FloatingPointError as exc:
            raise RoundFailed(f"round {t}: {exc}") from exc
        if snaps:
            w_k, b_k = trace.snapshots[cfg.rewind_epoch]
            rewind = Checkpoint(init.arch, w_k, b_k, f"epoch {cfg.rewind_epoch}")

        if cfg.strategy == "threshold":
            mask = threshold_prune(model.mask, cfg.alpha)
            if cfg.allow_regrowth:
                mask.frozen[:] = False
        elif cfg.strategy == "imp":
            mask = RelaxedMask.from_binary(imp_prune(model.weights, model.mask, cfg.prune_fraction))
        else:
            mask = hard_prune(model.mask, cfg.prune_fraction)
        model.mask = mask.copy()
        if cfg.strategy == "sigmoid":
            # latent scores restart at zero, i.e. survivors return to 1/2
            mask.values[~mask.frozen] = 0.5
        reports.append(
            RoundReport(
                round=t,
                survivors=mask.n_survivors,
                sparsity=mask.sparsity,
                val_accuracy=accuracy(model, val),
                objective=trace.objective[-1],
                histogram=mask_histogram(model.mask),
            )
        )
    return LotteryResult(model.mask.copy(), reports, model, rewind)


def evaluate_ticket(
    mask: RelaxedMask,
    init: Checkpoint,
    train: LabeledDataset,
    val: LabeledDataset,
    cfg: OptimConfig,
) -> float:
    """Binarise the mask, rewind to ``init``, retrain the weights alone, report validation accuracy."""
    model = init.model(mask.binarized())
    model, _ = train_joint(model, train, None, cfg, train_mask=False)
    return accuracy(model, val)
