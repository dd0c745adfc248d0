"""Models whose effective parameters are the product ``mask * weights``.

Two architectures are supported: binary logistic regression and a small
fully connected ReLU network with a softmax head. Every weight matrix is
flattened into a single vector ``w`` and paired with a relaxed mask of the
same length; bias terms are kept separate and are never masked.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import ShapeError, as_matrix

PROB_CLIP = 1e-12


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 2

    def __post_init__(self):
        X = as_matrix(self.features, "features")
        y = np.asarray(self.labels).astype(np.int64)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {X.shape[0]} feature rows")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes - 1}]")
        if self.split not in ("train", "validation"):
            raise ValueError(f"unknown split tag {self.split!r}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.split, self.n_classes)

    def with_features(self, X) -> "LabeledDataset":
        return LabeledDataset(X, self.labels, self.split, self.n_classes)


@dataclass
class RelaxedMask:
    """Mask values in [0, 1]; frozen coordinates are pinned to 0 for good."""

    values: np.ndarray
    frozen: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).copy()
        if self.frozen is None:
            self.frozen = np.zeros(self.values.shape, dtype=bool)
        else:
            self.frozen = np.asarray(self.frozen, dtype=bool).copy()
        if self.frozen.shape != self.values.shape:
            raise ShapeError("frozen flags and mask values differ in length")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        if np.any(self.values[self.frozen] != 0.0):
            raise ValueError("frozen coordinates must hold the value 0")

    @classmethod
    def full(cls, d: int, value: float = 0.5) -> "RelaxedMask":
        return cls(np.full(d, value))

    @classmethod
    def ones(cls, d: int) -> "RelaxedMask":
        return cls(np.ones(d))

    @classmethod
    def from_binary(cls, b) -> "RelaxedMask":
        b = np.asarray(b, dtype=bool)
        return cls(b.astype(np.float64), ~b)

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "RelaxedMask":
        return RelaxedMask(self.values, self.frozen)

    @property
    def survivors(self) -> np.ndarray:
        return ~self.frozen & (self.values > 0.0)

    @property
    def n_survivors(self) -> int:
        return int(np.count_nonzero(self.survivors))

    @property
    def sparsity(self) -> float:
        return 1.0 - self.n_survivors / max(len(self), 1)

    def binarized(self) -> "RelaxedMask":
        return RelaxedMask.from_binary(self.survivors)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticArch:
    n_features: int

    @property
    def n_weights(self) -> int:
        return self.n_features

    @property
    def n_bias(self) -> int:
        return 1

    @property
    def n_inputs(self) -> int:
        return self.n_features


@dataclass(frozen=True)
class MLPArch:
    sizes: tuple = (400, 32, 10)

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]

    @property
    def n_weights(self) -> int:
        return sum(o * i for o, i in self.shapes)

    @property
    def n_bias(self) -> int:
        return sum(self.sizes[1:])

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    def unflatten(self, flat: np.ndarray, biases: bool = False) -> list[np.ndarray]:
        out, pos = [], 0
        for o, i in self.shapes:
            n = o if biases else o * i
            chunk = flat[pos : pos + n]
            out.append(chunk if biases else chunk.reshape(o, i))
            pos += n
        return out


@dataclass
class MaskedModel:
    arch: LogisticArch | MLPArch
    weights: np.ndarray
    bias: np.ndarray
    mask: RelaxedMask = None
    l2: float = 0.0  # coefficient of (l2/2)||m*w||^2

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).copy()
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64)).copy()
        if self.mask is None:
            self.mask = RelaxedMask.ones(self.weights.size)
        if self.weights.shape != (self.arch.n_weights,):
            raise ShapeError(f"expected {self.arch.n_weights} weights, got {self.weights.shape}")
        if self.bias.shape != (self.arch.n_bias,):
            raise ShapeError(f"expected {self.arch.n_bias} bias terms, got {self.bias.shape}")
        if len(self.mask) != self.weights.size:
            raise ShapeError(f"mask length {len(self.mask)} differs from weight length {self.weights.size}")

    @property
    def effective(self) -> np.ndarray:
        return self.mask.values * self.weights

    def copy(self) -> "MaskedModel":
        return replace(self, weights=self.weights.copy(), bias=self.bias.copy(), mask=self.mask.copy())


def init_model(arch, rng: np.random.Generator, mask: RelaxedMask | None = None, l2: float = 0.0,
               scale: float | None = None) -> MaskedModel:
    """Random weights, zero biases.

    Logistic weights are N(0, scale^2) with scale 0.01 by default; MLP layers
    use He-normal initialisation (std sqrt(2 / fan_in)).
    """
    if isinstance(arch, LogisticArch):
        w = rng.normal(0.0, 0.01 if scale is None else scale, arch.n_weights)
    else:
        w = np.concatenate(
            [rng.normal(0.0, np.sqrt(2.0 / i) if scale is None else scale, o * i) for o, i in arch.shapes]
        )
    return MaskedModel(arch, w, np.zeros(arch.n_bias), mask, l2)


# ---------------------------------------------------------------------------
# forward / loss / gradients
# ---------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_features(model: MaskedModel, X) -> np.ndarray:
    X = as_matrix(X, "features")
    if X.shape[1] != model.arch.n_inputs:
        raise ShapeError(f"features have {X.shape[1]} columns, model expects {model.arch.n_inputs}")
    return X


def _mlp_forward(arch: MLPArch, eff: np.ndarray, bias: np.ndarray, X: np.ndarray):
    Ws = arch.unflatten(eff)
    bs = arch.unflatten(bias, biases=True)
    acts = [X]
    h = X
    for layer, (W, b) in enumerate(zip(Ws, bs)):
        z = h @ W.T + b
        h = np.maximum(z, 0.0) if layer < len(Ws) - 1 else z
        acts.append(h)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return acts, log_probs


def forward(model: MaskedModel, features) -> np.ndarray:
    """Class-1 probabilities (logistic) or an N x C matrix of class probabilities (MLP)."""
    X = _check_features(model, features)
    if isinstance(model.arch, LogisticArch):
        return sigmoid(X @ model.effective + model.bias[0])
    _, log_probs = _mlp_forward(model.arch, model.effective, model.bias, X)
    return np.exp(log_probs)


def predict(model: MaskedModel, features) -> np.ndarray:
    p = forward(model, features)
    if p.ndim == 1:
        return (p >= 0.5).astype(np.int64)
    return np.argmax(p, axis=1)


def accuracy(model: MaskedModel, data: LabeledDataset) -> float:
    return float(np.mean(predict(model, data.features) == data.labels))


def loss(model: MaskedModel, data: LabeledDataset) -> float:
    """Mean cross-entropy plus the optional l2 term on the effective weights."""
    X = _check_features(model, data.features)
    eff = model.effective
    if isinstance(model.arch, LogisticArch):
        p = np.clip(sigmoid(X @ eff + model.bias[0]), PROB_CLIP, 1.0 - PROB_CLIP)
        y = data.labels
        value = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    else:
        _, log_probs = _mlp_forward(model.arch, eff, model.bias, X)
        value = -np.mean(np.maximum(log_probs[np.arange(data.n), data.labels], np.log(PROB_CLIP)))
    if model.l2:
        value += 0.5 * model.l2 * float(eff @ eff)
    return float(value)


def effective_grads(model: MaskedModel, data: LabeledDataset) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradient of the loss with respect to (m*w, bias), plus the loss value."""
    X = _check_features(model, data.features)
    eff = model.effective
    n = data.n
    if isinstance(model.arch, LogisticArch):
        p = sigmoid(X @ eff + model.bias[0])
        y = data.labels
        pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
        value = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
        dz = (p - y) / n
        g_eff = X.T @ dz
        g_bias = np.array([dz.sum()])
    else:
        acts, log_probs = _mlp_forward(model.arch, eff, model.bias, X)
        value = -np.mean(np.maximum(log_probs[np.arange(n), data.labels], np.log(PROB_CLIP)))
        delta = np.exp(log_probs)
        delta[np.arange(n), data.labels] -= 1.0
        delta /= n
        Ws = model.arch.unflatten(eff)
        gW, gb = [], []
        for layer in range(len(Ws) - 1, -1, -1):
            gW.append(delta.T @ acts[layer])
            gb.append(delta.sum(axis=0))
            if layer:
                delta = (delta @ Ws[layer]) * (acts[layer] > 0)
        g_eff = np.concatenate([g.ravel() for g in reversed(gW)])
        g_bias = np.concatenate(list(reversed(gb)))
    if model.l2:
        value += 0.5 * model.l2 * float(eff @ eff)
        g_eff = g_eff + model.l2 * eff
    return g_eff, g_bias, float(value)


def grads(model: MaskedModel, data: LabeledDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dL/dw, dL/dm, dL/db). Frozen mask coordinates report a zero mask gradient."""
    g_eff, g_bias, _ = effective_grads(model, data)
    g_w = g_eff * model.mask.values
    g_m = g_eff * model.weights
    g_m[model.mask.frozen] = 0.0
    return g_w, g_m, g_bias


def mask_only_dataset(theta_hat, features) -> np.ndarray:
    """Rescale column j of the features by theta_hat[j], i.e. X @ diag(theta_hat).

    A mask trained with unit weights on the returned matrix is the same model
    as ``theta_hat * mask`` on the original features.
    """
    X = as_matrix(features, "features")
    theta = np.asarray(theta_hat, dtype=np.float64)
    if theta.shape != (X.shape[1],):
        raise ShapeError(f"theta_hat has shape {theta.shape}, features have {X.shape[1]} columns")
    return X * theta[None, :]
