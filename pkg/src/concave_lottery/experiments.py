"""Experiment drivers shared by the command line and the acceptance tests.

* ``sweep_seed`` / ``run_sweep``: accuracy and sparsity against lambda on the
  two-digit MNIST logistic-regression problem, for the dense fit, weight-space
  sign-subgradient l1, and relaxed masks with l1 / log penalties.
* ``run_lottery_experiment``: the rounds-of-pruning loop on a small MLP, with
  the dense baseline, ticket retraining and the ablation variants.
* ``run_bound_trials``: certificates on random planted instances.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MnistSubsetSpec, load_idx, make_subset
from .lottery import (
    Checkpoint,
    LotteryConfig,
    evaluate_ticket,
    matched_fraction,
    run_lottery,
    threshold_prune,
)
from .models import (
    LabeledDataset,
    LogisticArch,
    MaskedModel,
    MLPArch,
    RelaxedMask,
    accuracy,
    init_model,
    mask_only_dataset,
)
from .numerics import make_rng
from .optim import OptimConfig, lipschitz_logistic, pgd_mask_only, subgrad_l1_weights, train_joint
from .regularizers import RegularizerSpec
from .theory import BoundCertificate, certify, random_instance, solve_pgd, solve_relaxed

log = logging.getLogger(__name__)

METHODS = ("plain", "weight-subgradient-l1", "mask-l1", "mask-log")

_MNIST_NAMES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("images-idx3-ubyte", "labels-idx1-ubyte"),
)

BUNDLED_MNIST = Path(__file__).resolve().parents[2] / "data" / "mnist5k"


def find_mnist(directory) -> tuple[Path, Path]:
    directory = Path(directory)
    for img, lab in _MNIST_NAMES:
        for suffix in ("", ".gz"):
            ip, lp = directory / (img + suffix), directory / (lab + suffix)
            if ip.exists() and lp.exists():
                return ip, lp
    raise FileNotFoundError(f"no MNIST IDX image/label pair found in {directory}")


def load_mnist(directory=None) -> LabeledDataset:
    return load_idx(*find_mnist(directory or BUNDLED_MNIST))


def parse_grid(text: str) -> list[float]:
    """'0,1e-3,1e-2' or 'geom:START:STOP:COUNT' (log-spaced, endpoints included)."""
    text = text.strip()
    if text.startswith("geom:"):
        _, a, b, n = text.split(":")
        return [float(v) for v in np.geomspace(float(a), float(b), int(n))]
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# lambda sweep on two-digit MNIST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSettings:
    lambdas: tuple = tuple(parse_grid("geom:1e-3:1e-1:31"))
    seeds: tuple = (0, 1, 2)
    methods: tuple = METHODS
    subset: MnistSubsetSpec = field(default_factory=MnistSubsetSpec.digits01_split)
    alpha: float = 0.02
    epsilon: float = 0.1
    fit_lr: float = 1.0
    fit_momentum: float = 0.9
    fit_epochs: int = 500
    fit_l2: float = 1e-3
    pgd_epochs: int = 2000
    pgd_tol: float = 1e-7
    train_bias: bool = True

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown sweep methods {sorted(unknown)}")


SWEEP_HEADER = ("lambda", "seed", "method", "nonzeros", "sparsity", "val_accuracy", "status")
AGG_HEADER = ("lambda", "method", "runs", "nonzeros_mean", "nonzeros_std", "sparsity_mean",
              "sparsity_std", "val_accuracy_mean", "val_accuracy_std")


@dataclass(frozen=True)
class SweepRow:
    lam: float
    seed: int
    method: str
    nonzeros: int
    sparsity: float
    val_accuracy: float
    status: str = "ok"

    def row(self) -> list[str]:
        return [repr(self.lam), str(self.seed), self.method, str(self.nonzeros),
                f"{self.sparsity:.6f}", f"{self.val_accuracy:.6f}", self.status]


def _fit_cfg(s: SweepSettings, seed: int) -> OptimConfig:
    return OptimConfig(lr=s.fit_lr, momentum=s.fit_momentum, weight_decay=0.0,
                       epochs=s.fit_epochs, batch_size=None, seed=seed)


def fit_dense_logistic(train: LabeledDataset, s: SweepSettings, seed: int) -> MaskedModel:
    arch = LogisticArch(train.dim)
    model = init_model(arch, make_rng(seed + 100), l2=s.fit_l2)
    fitted, _ = train_joint(model, train, None, _fit_cfg(s, seed), train_mask=False)
    return fitted


def select_mask(theta, bias: float, train: LabeledDataset, reg: RegularizerSpec, s: SweepSettings,
                step: float | None = None) -> tuple[RelaxedMask, float]:
    """Mask-only selection over fixed weights; returns the thresholded mask and the bias."""
    if step is None:
        step = 1.0 / lipschitz_logistic(mask_only_dataset(theta, train.features))
    cfg = OptimConfig(lr=step, epochs=s.pgd_epochs, batch_size=None)
    mask, trace = pgd_mask_only(theta, train, reg, cfg, bias=bias, train_bias=s.train_bias, tol=s.pgd_tol)
    return threshold_prune(mask, s.alpha), trace.bias


def sweep_seed(seed: int, s: SweepSettings, full: LabeledDataset) -> list[SweepRow]:
    """All methods and lambdas for one seed (one train/validation draw and one initialisation)."""
    train, val = make_subset(full, s.subset, make_rng(seed))
    d = train.dim
    rows = []
    dense = fit_dense_logistic(train, s, seed)
    theta, b = dense.weights, float(dense.bias[0])
    step = 1.0 / lipschitz_logistic(mask_only_dataset(theta, train.features))
    dense_row = (int(np.count_nonzero(dense.weights)), accuracy(dense, val))
    init = init_model(LogisticArch(d), make_rng(seed + 100), l2=s.fit_l2)
    for lam in s.lambdas:
        for method in s.methods:
            try:
                if method == "plain":
                    nz, acc = dense_row
                elif method == "weight-subgradient-l1":
                    model, _ = subgrad_l1_weights(init, train, lam, _fit_cfg(s, seed))
                    nz, acc = int(np.count_nonzero(model.weights)), accuracy(model, val)
                else:
                    kind = method.split("-")[1]
                    reg = RegularizerSpec(kind, lam, s.epsilon)
                    mask, bias = select_mask(theta, b, train, reg, s, step)
                    sel = MaskedModel(LogisticArch(d), theta, [bias], mask)
                    nz, acc = mask.n_survivors, accuracy(sel, val)
                rows.append(SweepRow(lam, seed, method, nz, 1.0 - nz / d, acc))
            except (FloatingPointError, ValueError) as exc:
                log.warning("seed %d lambda %g method %s failed: %s", seed, lam, method, exc)
                rows.append(SweepRow(lam, seed, method, -1, math.nan, math.nan, f"failed: {exc}"))
    return rows


def _sweep_job(args):
    seed, s, mnist_dir = args
    return sweep_seed(seed, s, load_mnist(mnist_dir))


def run_sweep(s: SweepSettings, mnist_dir=None, workers: int = 1) -> list[SweepRow]:
    jobs = [(seed, s, mnist_dir) for seed in s.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sweep_job, jobs))
    else:
        full = load_mnist(mnist_dir)
        parts = [sweep_seed(seed, s, full) for seed in s.seeds]
    order = {m: i for i, m in enumerate(METHODS)}
    rows = [r for part in parts for r in part]
    return sorted(rows, key=lambda r: (r.seed, s.lambdas.index(r.lam), order[r.method]))


def aggregate(rows: list[SweepRow]) -> list[list[str]]:
    out = []
    keys = []
    for r in rows:
        if (r.lam, r.method) not in keys:
            keys.append((r.lam, r.method))
    for lam, method in sorted(keys, key=lambda k: (k[0], METHODS.index(k[1]))):
        ok = [r for r in rows if r.lam == lam and r.method == method and r.status == "ok"]
        if not ok:
            continue
        nz = np.array([r.nonzeros for r in ok], float)
        sp = np.array([r.sparsity for r in ok])
        ac = np.array([r.val_accuracy for r in ok])
        out.append([repr(lam), method, str(len(ok))] + [f"{v:.6f}" for v in
                   (nz.mean(), nz.std(), sp.mean(), sp.std(), ac.mean(), ac.std())])
    return out


def sparsest_at_accuracy(points, floor: float):
    """Sparsest (survivors, accuracy) point with accuracy >= floor; falls back to the most accurate."""
    ok = [p for p in points if p[1] >= floor] or [max(points, key=lambda p: (p[1], -p[0]))]
    return min(ok, key=lambda p: (p[0], -p[1]))


def log_beats_l1(rows: list[SweepRow], seed: int) -> tuple[bool, tuple, tuple]:
    """Does some mask-log run match mask-l1's best operating point with no more survivors and no less accuracy?

    mask-l1's operating point is its sparsest run that keeps the dense
    model's validation accuracy (its most accurate run if none does).
    """
    dense = next(r.val_accuracy for r in rows if r.seed == seed and r.method == "plain")
    l1 = [(r.nonzeros, r.val_accuracy) for r in rows if r.seed == seed and r.method == "mask-l1" and r.status == "ok"]
    lg = [(r.nonzeros, r.val_accuracy) for r in rows if r.seed == seed and r.method == "mask-log" and r.status == "ok"]
    target = sparsest_at_accuracy(l1, dense)
    hits = [p for p in lg if p[0] <= target[0] and p[1] >= target[1]]
    best = min(hits, key=lambda p: (p[0], -p[1])) if hits else sparsest_at_accuracy(lg, dense)
    return bool(hits), target, best


# ---------------------------------------------------------------------------
# lottery on a small MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LotterySettings:
    subset: MnistSubsetSpec = field(
        default_factory=lambda: MnistSubsetSpec(tuple(range(10)), 200, 100, 100, 20)
    )
    hidden: tuple = (32,)
    optim: OptimConfig = field(
        default_factory=lambda: OptimConfig(lr=0.1, momentum=0.9, weight_decay=1e-4, epochs=30,
                                            batch_size=128, milestones=(20,), mask_lr_scale=100.0)
    )
    reg: RegularizerSpec = field(default_factory=lambda: RegularizerSpec("log", 3e-4, 0.1))
    rounds: int = 3
    alpha: float = 0.02
    rewind_epoch: int | None = None
    allow_regrowth: bool = False
    hard_prune_p: float | None = None
    beta_final: float = 200.0
    ablation: bool = False

    def __post_init__(self):
        # fail at plan time rather than after the dense baseline has trained
        LotteryConfig(rounds=self.rounds, alpha=self.alpha, optim=self.optim, reg=self.reg,
                      rewind_epoch=self.rewind_epoch, beta_final=self.beta_final)
        if self.hard_prune_p is not None and not 0.0 < self.hard_prune_p < 1.0:
            raise ValueError(f"hard prune fraction must lie in (0, 1), got {self.hard_prune_p}")

    def arch(self) -> MLPArch:
        return MLPArch((self.subset.side**2, *self.hidden, len(self.subset.digits)))


LOTTERY_SUMMARY_HEADER = ("seed", "variant", "rounds", "survivors", "sparsity", "ticket_accuracy", "dense_accuracy")


@dataclass
class LotteryOutcome:
    seed: int
    dense_accuracy: float
    variants: dict  # name -> (LotteryResult, ticket accuracy)

    def summary_rows(self) -> list[list[str]]:
        out = []
        for name, (res, acc) in self.variants.items():
            out.append([str(self.seed), name, str(len(res.reports)), str(res.mask.n_survivors),
                        f"{res.mask.sparsity:.6f}", f"{acc:.6f}", f"{self.dense_accuracy:.6f}"])
        return out


def run_lottery_experiment(s: LotterySettings, full: LabeledDataset, seed: int) -> LotteryOutcome:
    """Dense baseline, the soft-threshold run and, with ``s.ablation``, its matched-sparsity baselines.

    When ``s.hard_prune_p`` is set the main run uses fixed-fraction pruning
    instead of the threshold.
    """
    train, val = make_subset(full, s.subset, make_rng(seed))
    arch = s.arch()
    init = Checkpoint.of(init_model(arch, make_rng(seed + 1)))
    optim = s.optim.with_(seed=seed)
    dense = evaluate_ticket(RelaxedMask.ones(arch.n_weights), init, train, val, optim)
    base = LotteryConfig(rounds=s.rounds, alpha=s.alpha, optim=optim, reg=s.reg,
                         rewind_epoch=s.rewind_epoch, allow_regrowth=s.allow_regrowth, beta_final=s.beta_final)
    if s.hard_prune_p is not None:
        main_cfg = _replace(base, strategy="hard", prune_fraction=s.hard_prune_p)
        main_name = "hard"
    else:
        main_cfg, main_name = base, "soft"
    variants = {}
    res = run_lottery(init, train, val, main_cfg)
    variants[main_name] = (res, evaluate_ticket(res.mask, init, train, val, optim))
    if s.ablation:
        p = matched_fraction(res.mask.sparsity, s.rounds)
        for name, strategy in (("hard", "hard"), ("sigmoid", "sigmoid"), ("imp", "imp")):
            if name == main_name:
                continue
            cfg = _replace(base, strategy=strategy, prune_fraction=p)
            r = run_lottery(init, train, val, cfg)
            variants[name] = (r, evaluate_ticket(r.mask, init, train, val, optim))
    return LotteryOutcome(seed, dense, variants)


def _replace(cfg: LotteryConfig, **kw) -> LotteryConfig:
    return LotteryConfig(**{**cfg.__dict__, **kw})


# ---------------------------------------------------------------------------
# bound certification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundSettings:
    trials: int = 1000
    d_min: int = 2
    d_max: int = 12
    gamma_min: float = 0.5
    gamma_max: float = 4.0
    lambda_min: float = 0.01
    lambda_max: float = 0.5
    regularizer: str = "l1"
    epsilon: float = 0.1
    grid_step: float = 0.01

    def __post_init__(self):
        if not 1 <= self.d_min <= self.d_max:
            raise ValueError("need 1 <= d_min <= d_max")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ValueError("need 0 < gamma_min <= gamma_max")
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if self.trials < 1:
            raise ValueError("need at least one trial")


BOUND_HEADER = ("trial", "d") + BoundCertificate.CSV_HEADER


def run_bound_trials(s: BoundSettings, seed: int) -> list[tuple[int, int, BoundCertificate]]:
    rng = make_rng(seed)
    out = []
    for trial in range(s.trials):
        inst = random_instance(rng, (s.d_min, s.d_max), (s.gamma_min, s.gamma_max), (s.lambda_min, s.lambda_max))
        reg = RegularizerSpec(s.regularizer, inst.lam, s.epsilon)
        m_star = solve_relaxed(inst, reg, s.grid_step)
        out.append((trial, inst.d, certify(inst, reg, m_star)))
    return out


def pgd_agreement(s: BoundSettings, seed: int, count: int) -> float:
    """Worst l_inf gap between PGD and the l1 closed form over the first ``count`` instances."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        inst = random_instance(rng, (s.d_min, s.d_max), (s.gamma_min, s.gamma_max), (s.lambda_min, s.lambda_max))
        reg = RegularizerSpec("l1", inst.lam)
        exact = solve_relaxed(inst, reg)
        worst = max(worst, float(np.max(np.abs(solve_pgd(inst, reg) - exact))))
    return worst
