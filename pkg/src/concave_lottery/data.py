"""MNIST IDX ingestion, two-class subsets and synthetic planted-support data."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import LabeledDataset

IMAGE_MAGIC = 0x00000803  # 2051
LABEL_MAGIC = 0x00000801  # 2049
_UBYTE = 0x08


class IdxFormatError(ValueError):
    """Malformed IDX content; the message names the byte offset involved."""


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX blob into an ndarray of the stored shape."""
    if len(raw) < 4:
        raise IdxFormatError(f"truncated header: {len(raw)} bytes, need 4 at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != _UBYTE:
        raise IdxFormatError(f"unsupported IDX type code 0x{raw[2]:02x} at offset 2 (only unsigned bytes)")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated dimension table: file ends at offset {len(raw)}, header needs {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise IdxFormatError(f"truncated payload: expected {size} bytes from offset {header}, found {len(raw) - header}")
    if len(raw) - header > size:
        raise IdxFormatError(f"{len(raw) - header - size} trailing bytes after offset {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError("only uint8 arrays can be written as IDX")
    header = bytes([0, 0, _UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def write_idx(path, arr: np.ndarray, compress: bool | None = None) -> None:
    path = Path(path)
    blob = serialize_idx(arr)
    if compress or (compress is None and path.suffix == ".gz"):
        # mtime=0 keeps the file bytes reproducible
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def load_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"image file has {images.ndim} dimensions at offset 3, expected 3")
    if labels.ndim != 1:
        raise IdxFormatError(f"label file has {labels.ndim} dimensions at offset 3, expected 1")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch at offset 4: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images, labels


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an image/label IDX pair; pixels are rescaled to [0, 1] and flattened."""
    images, labels = load_idx_arrays(images_path, labels_path)
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(X, labels, "train", n_classes=int(labels.max(initial=0)) + 1 if labels.size else 1)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out x n_in) matrix of overlap fractions between output and input cells."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    return np.clip(hi - lo, 0.0, None) * n_out


def resize_images(images: np.ndarray, side: int) -> np.ndarray:
    """Area-averaging resize of an (n, h, w) stack to (n, side, side).

    Every output pixel is the overlap-weighted mean of the input pixels it
    covers, so the value range and the mean intensity are preserved.
    """
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if (h, w) == (side, side):
        return images.copy()
    R = area_matrix(h, side)
    C = area_matrix(w, side)
    return np.einsum("ij,njk,lk->nil", R, images, C)


# ---------------------------------------------------------------------------
# subsets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MnistSubsetSpec:
    digits: tuple = (0, 1)
    per_class: int = 200
    train_per_class: int = 160
    val_per_class: int = 40
    side: int = 20
    intercept: bool = False

    def __post_init__(self):
        if self.train_per_class + self.val_per_class != self.per_class:
            raise ValueError("train and validation counts must add up to the per-class count")
        if len(set(self.digits)) != len(self.digits) or not self.digits:
            raise ValueError("digits must be a non-empty list without repeats")

    @classmethod
    def digits01_split(cls, per_digit: bool = True, **kw) -> "MnistSubsetSpec":
        """0/1 subset with 200 images per digit.

        ``per_digit=True`` keeps 160 training and 40 validation images of each
        digit; ``per_digit=False`` reads 160/40 as totals (80/20 per digit).
        """
        if per_digit:
            return cls((0, 1), 200, 160, 40, **kw)
        return cls((0, 1), 100, 80, 20, **kw)


def make_subset(data: LabeledDataset, spec: MnistSubsetSpec, rng: np.random.Generator,
                exclude=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-balanced sample without replacement, resized and relabelled to 0..len(digits)-1.

    ``exclude`` optionally lists row indices of ``data`` that must not be drawn.
    """
    side_in = int(round(np.sqrt(data.dim)))
    if side_in * side_in != data.dim:
        raise ValueError(f"feature width {data.dim} is not a square image")
    blocked = np.zeros(data.n, bool)
    if exclude is not None:
        blocked[np.asarray(exclude, dtype=np.int64)] = True
    tr_idx, va_idx, tr_lab, va_lab = [], [], [], []
    for new_label, digit in enumerate(spec.digits):
        pool = np.flatnonzero((data.labels == digit) & ~blocked)
        if pool.size < spec.per_class:
            raise ValueError(f"digit {digit}: {pool.size} samples available, {spec.per_class} requested")
        pick = rng.choice(pool, size=spec.per_class, replace=False)
        tr_idx.append(pick[: spec.train_per_class])
        va_idx.append(pick[spec.train_per_class :])
        tr_lab.append(np.full(spec.train_per_class, new_label))
        va_lab.append(np.full(spec.val_per_class, new_label))

    def build(idx, lab, split):
        idx = np.concatenate(idx)
        imgs = data.features[idx].reshape(-1, side_in, side_in)
        X = resize_images(imgs, spec.side).reshape(idx.size, -1)
        if spec.intercept:
            X = np.hstack([X, np.ones((idx.size, 1))])
        return LabeledDataset(X, np.concatenate(lab), split, n_classes=len(spec.digits))

    return build(tr_idx, tr_lab, "train"), build(va_idx, va_lab, "validation")


def make_synthetic_planted(d: int, k: int, n: int, noise: float, rng: np.random.Generator,
                           scale: float = 2.0) -> tuple[LabeledDataset, np.ndarray, np.ndarray]:
    """Binary labels from a k-sparse linear logit with label-flip probability ``noise``.

    Returns (dataset, support indices, generating coefficients). Features are
    standard normal; support coefficients have random signs and magnitudes in
    [scale/2, scale].
    """
    if not 0 <= k <= d:
        raise ValueError(f"need 0 <= k <= d, got k={k}, d={d}")
    if k == 0 and noise == 0:
        raise ValueError("k = 0 with zero noise yields a degenerate constant labelling")
    if not 0.0 <= noise < 0.5:
        raise ValueError("noise must lie in [0, 0.5)")
    support = np.sort(rng.choice(d, size=k, replace=False))
    beta = np.zeros(d)
    beta[support] = rng.choice([-1.0, 1.0], size=k) * rng.uniform(scale / 2, scale, size=k)
    X = rng.normal(size=(n, d))
    y = (X @ beta > 0).astype(np.int64)
    flip = rng.random(n) < noise
    y[flip] = 1 - y[flip]
    return LabeledDataset(X, y), support, beta


def export_csv(data: LabeledDataset, path) -> None:
    """Write features and label as a headed CSV (debugging aid)."""
    cols = [f"x{j}" for j in range(data.dim)] + ["label"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row, lab in zip(data.features, data.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")
