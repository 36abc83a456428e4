"""Core raster types, windowed reads and tile resampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import RasterBoundsError

DEFAULT_IGNORE_ID = 65535


@dataclass(frozen=True, order=True)
class Window:
    """Axis-aligned pixel rectangle, ``row``/``col`` of the top-left corner."""

    row: int
    col: int
    h: int
    w: int

    def __post_init__(self):
        if self.row < 0 or self.col < 0:
            raise RasterBoundsError(f"negative window offset ({self.row}, {self.col})")
        if self.h <= 0 or self.w <= 0:
            raise RasterBoundsError(f"non-positive window size ({self.h}, {self.w})")

    @property
    def bottom(self) -> int:
        return self.row + self.h

    @property
    def right(self) -> int:
        return self.col + self.w

    def contains(self, other: Window) -> bool:
        return (
            self.row <= other.row
            and self.col <= other.col
            and other.bottom <= self.bottom
            and other.right <= self.right
        )

    def check_bounds(self, height: int, width: int) -> None:
        if self.bottom > height:
            raise RasterBoundsError(
                f"window bottom edge {self.bottom} exceeds raster height {height}"
            )
        if self.right > width:
            raise RasterBoundsError(
                f"window right edge {self.right} exceeds raster width {width}"
            )

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.bottom), slice(self.col, self.right)


class Provenance(enum.IntEnum):
    ANCHOR = 0
    MSAR_K = 1
    SRRTA_GSD = 2
    SRRTA_RESIZE = 3


@dataclass
class LabeledRaster:
    """One scene: ``image`` is (H, W, C) uint8, ``labels`` is (H, W) uint16.

    Either plane may be a ``numpy.memmap``; nothing here forces a full load.
    """

    image: np.ndarray
    labels: np.ndarray
    gsd: float = 1.0
    ignore_id: int = DEFAULT_IGNORE_ID
    scene_id: str = ""

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3 or self.labels.ndim != 2:
            raise ValueError("image must be (H, W, C) and labels (H, W)")
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and labels {self.labels.shape} differ in size"
            )
        if self.image.dtype != np.uint8:
            raise ValueError(f"image plane must be uint8, got {self.image.dtype}")
        if self.labels.dtype != np.uint16:
            raise ValueError(f"label plane must be uint16, got {self.labels.dtype}")
        if not self.gsd > 0:
            raise ValueError(f"gsd must be positive, got {self.gsd}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def channels(self) -> int:
        return self.image.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class Tile:
    """A pixel block cut from a raster.

    ``window`` is the source location, or None when the tile was read back
    from an archive (which does not carry source geometry).
    """

    window: Window | None
    image: np.ndarray
    labels: np.ndarray
    scale: int = 1
    provenance: Provenance = Provenance.ANCHOR
    gsd: float = 1.0
    ignore_id: int = DEFAULT_IGNORE_ID
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def read_window(raster: LabeledRaster, win: Window) -> Tile:
    """Copy the pixels under ``win`` out of ``raster``.

    Only the rows covered by the window are touched, so memory-mapped
    scenes are never materialized.
    """
    win.check_bounds(raster.height, raster.width)
    rs, cs = win.slices()
    return Tile(
        window=win,
        image=np.array(raster.image[rs, cs], dtype=np.uint8, copy=True),
        labels=np.array(raster.labels[rs, cs], dtype=np.uint16, copy=True),
        scale=1,
        provenance=Provenance.ANCHOR,
        gsd=raster.gsd,
        ignore_id=raster.ignore_id,
    )


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of area-overlap weights; every row sums to 1."""
    # Work in units of 1/n_out of an input pixel so all edges are integers.
    lo = np.arange(n_out)[:, None] * n_in
    hi = lo + n_in
    src_lo = np.arange(n_in)[None, :] * n_out
    src_hi = src_lo + n_out
    overlap = np.clip(np.minimum(hi, src_hi) - np.maximum(lo, src_lo), 0, None)
    return overlap.astype(np.float64) / n_in


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.int64) * n_in) // n_out


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resample of a (H, W, C) uint8 block."""
    h, w, c = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    wr = area_weights(h, out_h)
    wc = area_weights(w, out_w)
    out = np.empty((out_h, out_w, c), dtype=np.uint8)
    # One channel at a time keeps the float intermediate small.
    for ch in range(c):
        plane = wr @ image[:, :, ch].astype(np.float64) @ wc.T
        out[:, :, ch] = np.clip(np.rint(plane), 0, 255).astype(np.uint8)
    return out


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resample; source index is floor(out_idx * in / out)."""
    h, w = labels.shape
    if (h, w) == (out_h, out_w):
        return labels.copy()
    return labels[np.ix_(nearest_index(h, out_h), nearest_index(w, out_w))]


def resize_tile(tile: Tile, out_h: int, out_w: int, scale: int | None = None) -> Tile:
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    h, w = tile.shape
    return replace(
        tile,
        image=resize_image(tile.image, out_h, out_w),
        labels=resize_labels(tile.labels, out_h, out_w),
        scale=tile.scale if scale is None else scale,
        gsd=tile.gsd * max(h / out_h, w / out_w),
        meta=dict(tile.meta),
    )


def clamp_window(row: int, col: int, h: int, w: int, height: int, width: int) -> Window:
    """Window of size (h, w) moved up/left as needed to end inside the raster."""
    if h > height or w > width:
        raise RasterBoundsError(
            f"window ({h}, {w}) larger than raster ({height}, {width})"
        )
    return Window(min(row, height - h), min(col, width - w), h, w)
