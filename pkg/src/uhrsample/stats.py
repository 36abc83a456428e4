"""Class histograms and softmax cross-entropy balance diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError
from .raster import LabeledRaster, Tile

ROW_CHUNK = 32


@dataclass
class ClassHistogram:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative 1-d array")

    @classmethod
    def zeros(cls, num_classes: int) -> ClassHistogram:
        return cls(np.zeros(num_classes, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def shares(self) -> np.ndarray:
        total = self.total
        if total == 0:
            return np.zeros(self.num_classes)
        return self.counts / total

    def __add__(self, other: ClassHistogram) -> ClassHistogram:
        if self.num_classes != other.num_classes:
            raise ValueError("histograms have different class counts")
        return ClassHistogram(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ClassHistogram) and np.array_equal(self.counts, other.counts)


def count_labels(labels: np.ndarray, num_classes: int, ignore_id: int) -> np.ndarray:
    flat = np.asarray(labels).ravel()
    valid = flat[flat != ignore_id]
    if valid.size and int(valid.max()) >= num_classes:
        bad = int(valid[valid >= num_classes][0])
        raise DataError(f"label value {bad} out of range for {num_classes} classes")
    return np.bincount(valid, minlength=num_classes).astype(np.int64)


def _iter_label_blocks(source, ignore_id):
    if isinstance(source, LabeledRaster):
        for r in range(0, source.height, ROW_CHUNK):
            yield source.labels[r : r + ROW_CHUNK], source.ignore_id
    elif isinstance(source, Tile):
        yield source.labels, source.ignore_id
    elif isinstance(source, np.ndarray):
        yield source, ignore_id
    else:
        for item in source:
            yield from _iter_label_blocks(item, ignore_id)


def pixel_histogram(source, num_classes: int, ignore_id: int | None = None) -> ClassHistogram:
    """Exact per-class pixel counts over a raster, tile, label array or an iterable of them.

    Rasters are read in row chunks, so memory-mapped scenes stay on disk.
    Plain arrays use ``ignore_id`` (default 65535); rasters and tiles carry their own.
    """
    if ignore_id is None:
        ignore_id = 65535
    counts = np.zeros(num_classes, dtype=np.int64)
    for block, ign in _iter_label_blocks(source, ignore_id):
        counts += count_labels(block, num_classes, ign)
    return ClassHistogram(counts)


def tail_classes(hist: ClassHistogram, threshold: float = 0.05) -> list[int]:
    """Rarest classes, taken in ascending share order until their joint share reaches ``threshold``.

    Only classes below the uniform share 1/n (n = classes present) qualify,
    and empty classes are skipped. With shares (0.7, 0.2, 0.07, 0.03) and
    threshold 0.05 this yields [3, 2].
    """
    shares = hist.shares()
    present = [c for c in range(hist.num_classes) if hist.counts[c] > 0]
    order = sorted(present, key=lambda c: (shares[c], c))
    tail, cum = [], 0.0
    for c in order:
        if cum >= threshold or shares[c] * len(present) >= 1.0:
            break
        tail.append(c)
        cum += shares[c]
    return tail


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("softmax input contains NaN or infinite values")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("softmax input contains NaN or infinite values")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _check_onehot(logits: np.ndarray, onehot: np.ndarray) -> None:
    if logits.ndim != 2 or logits.shape != onehot.shape:
        raise ValueError(f"logits {logits.shape} and onehot {onehot.shape} must be equal B x C")
    rows = onehot.sum(axis=1)
    if np.any((onehot != 0) & (onehot != 1)) or np.any((rows != 0) & (rows != 1)):
        raise ValueError("each onehot row must hold a single 1 or be all zero (ignored)")


def ce_logit_grad(logits, onehot) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its B x C gradient w.r.t. the logits.

    All-zero onehot rows are ignored samples: they add nothing to the loss,
    the gradient, or the batch size B.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    _check_onehot(z, y)
    labeled = y.sum(axis=1)
    b = int(labeled.sum())
    if b == 0:
        return 0.0, np.zeros_like(z)
    logp = log_softmax(z)
    loss = -float((y * logp).sum()) / b
    grad = (np.exp(logp) * labeled[:, None] - y) / b
    return loss, grad


def ce_loss_and_grad(logits, onehot) -> tuple[float, np.ndarray]:
    """Loss plus the batch-aggregated per-class gradient (1/B) * sum_n (p_ni - y_ni).

    The sum over the batch is exactly rounded, so a balanced batch under
    uniform probabilities gives exact zeros.
    """
    loss, _ = ce_logit_grad(logits, onehot)
    y = np.asarray(onehot, dtype=np.float64)
    labeled = y.sum(axis=1) > 0
    b = int(labeled.sum())
    if b == 0:
        return loss, np.zeros(y.shape[1])
    probs = softmax(np.asarray(logits, dtype=np.float64)[labeled])
    return loss, balance_residual(probs, y[labeled]) / b


def balance_residual(probs, onehot) -> np.ndarray:
    """Per-class sum over the batch of (p - y), using exactly rounded sums."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.ndim != 2 or p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and onehot {y.shape} must be equal B x C")
    return np.array(
        [math.fsum(np.concatenate([p[:, i], -y[:, i]])) for i in range(p.shape[1])]
    )


@dataclass
class BatchDiagnostics:
    B: int
    C: int
    counts: np.ndarray
    residual: np.ndarray
    grad: np.ndarray
    imbalance_ratio: float

    @property
    def shares(self) -> np.ndarray:
        return self.counts / self.B if self.B else np.zeros(self.C)


def uniform_probe_diagnostics(hist: ClassHistogram) -> BatchDiagnostics:
    """Balance diagnostics for a predictor that outputs 1/C for every class.

    Every labelled pixel is one sample, so residual_i = B/C - n_i and
    grad_i = residual_i / B. Computed from integer counts, a balanced batch
    gives exact zeros.
    """
    counts = hist.counts.copy()
    b, c = int(counts.sum()), hist.num_classes
    residual = (b - c * counts) / c
    grad = residual / b if b else np.zeros(c)
    nonzero = counts[counts > 0]
    ratio = float(nonzero.max() / nonzero.min()) if nonzero.size else math.nan
    return BatchDiagnostics(b, c, counts, residual, grad, ratio)


def batch_diagnostics(tiles: Iterable[Tile], num_classes: int) -> BatchDiagnostics:
    return uniform_probe_diagnostics(pixel_histogram(list(tiles), num_classes))
