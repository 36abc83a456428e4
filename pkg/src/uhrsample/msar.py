"""Multi-scale anchored region sampling.

An anchor window is drawn uniformly from the scene. For every scale k the
crop pool holds all windows of size (k*h, k*w) that lie on the (h, w)
stride grid and fully contain the anchor. One window per pool is drawn,
downscaled to the anchor size, and emitted after the anchor tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import LabeledRaster, Provenance, Tile, Window, read_window, resize_tile


@dataclass(frozen=True)
class MsarConfig:
    anchor_h: int
    anchor_w: int
    scales: tuple[int, ...] = (2, 3, 4)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(k) for k in self.scales))
        if self.anchor_h <= 0 or self.anchor_w <= 0:
            raise ValueError(f"anchor size must be positive, got ({self.anchor_h}, {self.anchor_w})")
        if any(k <= 1 for k in self.scales):
            raise ValueError(f"scales must be > 1, got {self.scales}")
        if list(self.scales) != sorted(set(self.scales)):
            raise ValueError(f"scales must be strictly ascending, got {self.scales}")
        if max(self.scales, default=1) > 15:
            raise ValueError("scales above 15 are not supported by the tile archive")


@dataclass
class CropPool:
    k: int
    windows: list[Window]
    fallback: bool = False


@dataclass
class TrainingSample:
    scene_id: str
    tiles: list[Tile] = field(default_factory=list)
    pools: list[CropPool] = field(default_factory=list)

    @property
    def anchor(self) -> Window:
        return self.tiles[0].window


def pick_anchor(height: int, width: int, cfg: MsarConfig, rng: np.random.Generator) -> Window:
    """Uniform draw over every top-left position where the anchor fits."""
    h, w = cfg.anchor_h, cfg.anchor_w
    if h > height or w > width:
        raise ValueError(f"anchor ({h}, {w}) larger than raster ({height}, {width})")
    row = int(rng.integers(0, height - h + 1))
    col = int(rng.integers(0, width - w + 1))
    return Window(row, col, h, w)


def _grid_starts(a0: int, a_len: int, step: int, span: int, limit: int) -> range:
    """Multiples of ``step`` in [0, limit - span] whose span-window covers [a0, a0 + a_len)."""
    if span > limit:
        return range(0)
    lo = max(0, a0 + a_len - span)
    hi = min(a0, limit - span)
    first = -(-lo // step) * step
    return range(first, hi + 1, step)


def _fallback_start(a0: int, step: int, span: int, limit: int) -> int:
    return min((a0 // step) * step, limit - span)


def build_pools(height: int, width: int, anchor: Window, cfg: MsarConfig) -> list[CropPool]:
    """Crop pools in ascending scale order.

    Grid loops include i = H - k*h when it lies on the grid. If a pool comes
    out empty (anchor off-grid near an edge, or k*h > H) it is replaced by a
    single window of size min(k*h, H) x min(k*w, W) that contains the anchor,
    flagged via ``fallback``.
    """
    anchor.check_bounds(height, width)
    h, w = cfg.anchor_h, cfg.anchor_w
    pools = []
    for k in cfg.scales:
        kh, kw = k * h, k * w
        rows = _grid_starts(anchor.row, anchor.h, h, kh, height)
        cols = _grid_starts(anchor.col, anchor.w, w, kw, width)
        windows = [Window(i, j, kh, kw) for i in rows for j in cols]
        if windows:
            pools.append(CropPool(k, windows))
            continue
        fh, fw = min(kh, height), min(kw, width)
        win = Window(
            _fallback_start(anchor.row, h, fh, height),
            _fallback_start(anchor.col, w, fw, width),
            fh,
            fw,
        )
        pools.append(CropPool(k, [win], fallback=True))
    return pools


def sample_msar(raster: LabeledRaster, cfg: MsarConfig, rng: np.random.Generator) -> TrainingSample:
    anchor = pick_anchor(raster.height, raster.width, cfg, rng)
    sample = TrainingSample(raster.scene_id, [read_window(raster, anchor)])
    sample.pools = build_pools(raster.height, raster.width, anchor, cfg)
    for pool in sample.pools:
        win = pool.windows[int(rng.integers(len(pool.windows)))]
        tile = resize_tile(read_window(raster, win), cfg.anchor_h, cfg.anchor_w, scale=pool.k)
        tile.provenance = Provenance.MSAR_K
        tile.meta["fallback"] = pool.fallback
        sample.tiles.append(tile)
    return sample
