"""Deterministic synthetic long-tail scenes for tests and demos.

Classes are level sets of one smooth random field. Quantile thresholds
give the requested pixel shares; the rarest classes sit at the field's
extremes so they form isolated blobs (peaks and troughs) rather than
thin rings.
"""

from __future__ import annotations

from collections import deque
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import SceneHeader, SceneWriter
from .raster import DEFAULT_IGNORE_ID, LabeledRaster

BAND_ROWS = 256
HIST_BINS = 1 << 16
NOISE_SIGMA = 8.0


def check_freqs(class_freqs: Sequence[float]) -> np.ndarray:
    freqs = np.asarray(class_freqs, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ValueError("class_freqs must be a non-empty list")
    if np.any(freqs <= 0) or not np.all(np.isfinite(freqs)):
        raise ValueError(f"class_freqs must be positive, got {list(class_freqs)}")
    if abs(freqs.sum() - 1.0) > 1e-6:
        raise ValueError(f"class_freqs must sum to 1, got {freqs.sum()!r}")
    return freqs


def band_layout(freqs: np.ndarray) -> list[int]:
    """Class order from the field minimum upward: head in the middle, tails outside."""
    order = sorted(range(len(freqs)), key=lambda c: (-freqs[c], c))
    layout = deque(order[:1])
    for i, c in enumerate(order[1:]):
        if i % 2 == 0:
            layout.appendleft(c)
        else:
            layout.append(c)
    return list(layout)


class _Field:
    def __init__(self, rng: np.random.Generator, h: int, w: int, cell: int | None):
        self.cell = cell or max(4, min(h, w) // 32)
        gh, gw = h // self.cell + 2, w // self.cell + 2
        self.coarse = gaussian_filter(rng.standard_normal((gh, gw)), sigma=1.0, mode="wrap")
        self.w = w
        x = np.arange(w) / self.cell
        self.x0 = np.floor(x).astype(np.int64)
        self.fx = x - self.x0

    def rows(self, r0: int, r1: int) -> np.ndarray:
        y = np.arange(r0, r1) / self.cell
        y0 = np.floor(y).astype(np.int64)
        fy = (y - y0)[:, None]
        c = self.coarse
        top = c[y0][:, self.x0] * (1 - self.fx) + c[y0][:, self.x0 + 1] * self.fx
        bot = c[y0 + 1][:, self.x0] * (1 - self.fx) + c[y0 + 1][:, self.x0 + 1] * self.fx
        return top * (1 - fy) + bot * fy


def _synth_bands(
    seed: int,
    h: int,
    w: int,
    class_freqs: Sequence[float],
    channels: int,
    cell: int | None,
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    freqs = check_freqs(class_freqs)
    rng = np.random.default_rng(seed)
    colors = rng.integers(0, 256, size=(len(freqs), channels)).astype(np.float64)
    field = _Field(rng, h, w, cell)
    layout = band_layout(freqs)

    # Pass 1: histogram of field values to place the quantile thresholds.
    lo, hi = float(field.coarse.min()), float(field.coarse.max())
    hi = max(hi, lo + 1e-12)
    counts = np.zeros(HIST_BINS, dtype=np.int64)
    for r0 in range(0, h, BAND_ROWS):
        vals = field.rows(r0, min(h, r0 + BAND_ROWS))
        counts += np.histogram(vals, bins=HIST_BINS, range=(lo, hi))[0]
    edges = np.linspace(lo, hi, HIST_BINS + 1)
    cum = np.cumsum(counts) / float(h * w)
    targets = np.cumsum(freqs[layout])[:-1]
    idx = np.clip(np.searchsorted(cum, targets - 1e-12), 0, HIST_BINS - 1)
    thresholds = edges[idx + 1]
    lut = np.asarray(layout, dtype=np.uint16)

    # Pass 2: labels and a noisy per-class colour for each band.
    for band, r0 in enumerate(range(0, h, BAND_ROWS)):
        r1 = min(h, r0 + BAND_ROWS)
        vals = field.rows(r0, r1)
        labels = lut[np.searchsorted(thresholds, vals, side="right")]
        noise_rng = np.random.default_rng([seed, band])
        img = colors[labels] + noise_rng.normal(0.0, NOISE_SIGMA, size=(r1 - r0, w, channels))
        image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        yield r0, image, labels


def synth_longtail(
    seed: int,
    h: int,
    w: int,
    class_freqs: Sequence[float],
    channels: int = 3,
    gsd: float = 1.0,
    ignore_id: int = DEFAULT_IGNORE_ID,
    scene_id: str = "",
    cell: int | None = None,
) -> LabeledRaster:
    """Build an in-memory scene whose class shares follow ``class_freqs``."""
    image = np.empty((h, w, channels), dtype=np.uint8)
    labels = np.empty((h, w), dtype=np.uint16)
    for r0, img, lab in _synth_bands(seed, h, w, class_freqs, channels, cell):
        image[r0 : r0 + lab.shape[0]] = img
        labels[r0 : r0 + lab.shape[0]] = lab
    return LabeledRaster(image, labels, gsd=gsd, ignore_id=ignore_id, scene_id=scene_id)


def write_synth_scene(
    path,
    seed: int,
    h: int,
    w: int,
    class_freqs: Sequence[float],
    channels: int = 3,
    gsd: float = 1.0,
    ignore_id: int = DEFAULT_IGNORE_ID,
    cell: int | None = None,
) -> None:
    """Same content as ``synth_longtail`` but streamed straight to disk."""
    header = SceneHeader(h, w, channels, gsd, ignore_id)
    with SceneWriter(path, header) as out:
        for r0, img, lab in _synth_bands(seed, h, w, class_freqs, channels, cell):
            out.write_rows(r0, img, lab)
