"""Confusion matrices, IoU / mIoU, sliding-window plans and stitching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EvaluationError, ProtocolError
from .raster import LabeledRaster, Window

DEFAULT_WINDOW = (512, 512)
DEFAULT_STRIDE = (341, 341)
ROW_CHUNK = 32


@dataclass
class ConfusionMatrix:
    """``m[gt, pred]`` pixel counts."""

    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.int64)
        if self.m.ndim != 2 or self.m.shape[0] != self.m.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.m.shape}")
        if np.any(self.m < 0):
            raise ValueError("confusion matrix entries must be non-negative")

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def C(self) -> int:
        return self.m.shape[0]

    @property
    def total(self) -> int:
        return int(self.m.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.C != other.C:
            raise ValueError("confusion matrices have different class counts")
        return ConfusionMatrix(self.m + other.m)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.m, other.m)


def confusion_counts(gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore_id: int) -> np.ndarray:
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"gt and pred differ in size: {gt.shape} vs {pred.shape}")
    keep = gt != ignore_id
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    for name, arr in (("ground truth", g), ("prediction", p)):
        if arr.size and (arr.max() >= num_classes or arr.min() < 0):
            bad = int(arr[(arr >= num_classes) | (arr < 0)][0])
            raise DataError(f"{name} label {bad} out of range for {num_classes} classes")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def accumulate(cm: ConfusionMatrix, gt, pred, ignore_id: int = 65535) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one gt/pred pair; pixels with gt == ignore_id are skipped."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"gt {gt.shape} and pred {pred.shape} differ in size")
    return ConfusionMatrix(cm.m + confusion_counts(gt, pred, cm.C, ignore_id))


@dataclass
class IouResult:
    iou: np.ndarray  # NaN where the class never occurs in gt or pred
    miou: float
    defined: np.ndarray
    excluded: list[int] = field(default_factory=list)


def iou_miou(cm: ConfusionMatrix, exclude: Sequence[int] = ()) -> IouResult:
    """IoU_i = TP / (TP + FP + FN); mIoU averages the defined, non-excluded classes."""
    m = cm.m
    tp = np.diag(m).astype(np.float64)
    union = m.sum(axis=0) + m.sum(axis=1) - np.diag(m)
    defined = union > 0
    iou = np.full(cm.C, np.nan)
    iou[defined] = tp[defined] / union[defined]
    use = defined.copy()
    for c in exclude:
        use[c] = False
    if not use.any():
        raise EvaluationError("no class with a non-empty union to average")
    return IouResult(iou, float(np.mean(iou[use])), defined, sorted(set(exclude)))


def evaluate_planes(gt_raster: LabeledRaster, pred_labels, num_classes: int) -> ConfusionMatrix:
    """Confusion matrix of a prediction plane against a scene, streamed in row chunks."""
    if tuple(pred_labels.shape) != gt_raster.shape:
        raise ValueError(f"prediction {pred_labels.shape} does not match scene {gt_raster.shape}")
    cm = ConfusionMatrix.zeros(num_classes)
    for r in range(0, gt_raster.height, ROW_CHUNK):
        cm.m += confusion_counts(
            gt_raster.labels[r : r + ROW_CHUNK],
            pred_labels[r : r + ROW_CHUNK],
            num_classes,
            gt_raster.ignore_id,
        )
    return cm


# --------------------------------------------------------------------------
# sliding windows


@dataclass
class WindowPlan:
    height: int
    width: int
    window: tuple[int, int]
    stride: tuple[int, int]
    windows: list[Window]


def axis_starts(length: int, win: int, stride: int) -> list[int]:
    """Grid starts i*stride <= length - win, plus length - win if that is off-grid."""
    if win > length:
        raise ValueError(f"window {win} larger than raster side {length}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    starts = list(range(0, length - win + 1, stride))
    if starts[-1] != length - win:
        starts.append(length - win)
    return starts


def plan_windows(height: int, width: int, window=DEFAULT_WINDOW, stride=DEFAULT_STRIDE) -> WindowPlan:
    wh, ww = window
    rows = axis_starts(height, wh, stride[0])
    cols = axis_starts(width, ww, stride[1])
    wins = [Window(r, c, wh, ww) for r in rows for c in cols]
    return WindowPlan(height, width, (wh, ww), tuple(stride), wins)


def stitch(tiles: Sequence[np.ndarray], plan: WindowPlan, policy: str = "avg_logits",
           num_classes: int | None = None) -> np.ndarray:
    """Merge per-window predictions into one (H, W) uint16 label plane.

    ``tiles[i]`` belongs to ``plan.windows[i]`` and is either (h, w, C)
    logits or an (h, w) label tile. ``avg_logits`` averages logits over all
    covering windows (label tiles count as one-hot votes) and takes the
    argmax, lowest class id on ties. ``last_write`` lets later windows
    overwrite earlier ones.
    """
    if len(tiles) != len(plan.windows):
        raise ProtocolError(f"plan has {len(plan.windows)} windows but got {len(tiles)} tiles")
    for i, (tile, win) in enumerate(zip(tiles, plan.windows)):
        if tile is None:
            raise ProtocolError(f"missing tile for window {i} {win}")
        if tuple(tile.shape[:2]) != (win.h, win.w):
            raise ProtocolError(f"tile {i} is {tile.shape[:2]}, window is {(win.h, win.w)}")

    if policy == "last_write":
        out = np.zeros((plan.height, plan.width), dtype=np.uint16)
        for tile, win in zip(tiles, plan.windows):
            rs, cs = win.slices()
            out[rs, cs] = tile if tile.ndim == 2 else np.argmax(tile, axis=-1)
        return out
    if policy != "avg_logits":
        raise ValueError(f"unknown stitch policy {policy!r}")

    if num_classes is None:
        num_classes = max(
            t.shape[-1] if t.ndim == 3 else int(np.max(t)) + 1 for t in tiles
        )
    acc = np.zeros((plan.height, plan.width, num_classes), dtype=np.float64)
    hits = np.zeros((plan.height, plan.width, 1), dtype=np.float64)
    eye = np.eye(num_classes)
    for tile, win in zip(tiles, plan.windows):
        rs, cs = win.slices()
        acc[rs, cs] += eye[tile] if tile.ndim == 2 else tile
        hits[rs, cs] += 1.0
    if np.any(hits == 0):
        raise ProtocolError("plan does not cover every pixel")
    return np.argmax(acc / hits, axis=-1).astype(np.uint16)


def coverage(plan: WindowPlan) -> np.ndarray:
    cov = np.zeros((plan.height, plan.width), dtype=np.int32)
    for win in plan.windows:
        rs, cs = win.slices()
        cov[rs, cs] += 1
    return cov


def format_iou_table(result: IouResult, names: Iterable[str] | None = None) -> str:
    names = list(names) if names is not None else [str(i) for i in range(len(result.iou))]
    lines = ["class\tiou"]
    for name, v in zip(names, result.iou):
        lines.append(f"{name}\t{'undefined' if math.isnan(v) else f'{v:.6f}'}")
    lines.append(f"mIoU\t{result.miou:.6f}")
    return "\n".join(lines) + "\n"
