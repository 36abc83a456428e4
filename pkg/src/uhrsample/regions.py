"""Region records, tail-first reranking and region-based resampling.

Object masks come from an external segmenter (stored as mask archives) or,
for synthetic scenes, from connected components of the label plane. Each
mask becomes a ``RegionRecord``; records are ranked so that regions whose
primary class is globally rare come first, and the top of the ranking is
sampled into training tiles.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyRegionError, FormatError
from .msar import MsarConfig, sample_msar
from .raster import (
    LabeledRaster,
    Provenance,
    Tile,
    Window,
    read_window,
    resize_tile,
)
from .stats import BatchDiagnostics, ClassHistogram, batch_diagnostics

DEFAULT_ARR_LEN_FACTOR = 0.07
GSD_PLACEMENTS = ("random", "top_left")


class SampleMode(str, enum.Enum):
    GSD_PRESERVING = "gsd_preserving"
    RESIZE = "resize"
    WG_RESCRO = "wg_rescro"

    @classmethod
    def parse(cls, text: str) -> SampleMode:
        aliases = {"gsd": cls.GSD_PRESERVING, "wgrescro": cls.WG_RESCRO}
        return aliases.get(text) or cls(text)


@dataclass(frozen=True)
class RegionRecord:
    scene_id: str
    bbox: Window
    class_counts: tuple[int, ...]
    primary_class: int
    richness: int
    rank: int = -1
    source: str = field(default="mask_file", compare=False)


@dataclass(frozen=True)
class SamplerConfig:
    mode: SampleMode = SampleMode.GSD_PRESERVING
    train_h: int = 512
    train_w: int = 512
    top_k: int = 4
    arr_len_factor: float = DEFAULT_ARR_LEN_FACTOR
    wg_draws: int | None = None
    seed: int = 0
    gsd_placement: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "mode", SampleMode(self.mode))
        if self.gsd_placement not in GSD_PLACEMENTS:
            raise ValueError(f"gsd_placement must be one of {GSD_PLACEMENTS}")
        if self.train_h <= 0 or self.train_w <= 0:
            raise ValueError("train size must be positive")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not self.arr_len_factor > 0:
            raise ValueError(f"arr_len_factor must be > 0, got {self.arr_len_factor}")
        if self.wg_draws is not None and self.wg_draws < 1:
            raise ValueError("wg_draws must be >= 1")

    @property
    def draws(self) -> int:
        return self.top_k if self.wg_draws is None else self.wg_draws


# --------------------------------------------------------------------------
# masks -> records


def mask_to_bbox(mask: np.ndarray, origin: tuple[int, int] = (0, 0)) -> Window:
    """Tight inclusive box around the foreground: (y_min, x_min) to (y_max, x_max).

    x is the column axis, y the row axis; the window is returned as
    (row, col, h, w).
    """
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyRegionError("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    y_min, y_max = int(rows[0]), int(rows[-1])
    x_min, x_max = int(cols[0]), int(cols[-1])
    return Window(origin[0] + y_min, origin[1] + x_min, y_max - y_min + 1, x_max - x_min + 1)


def annotate_region(
    mask: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    ignore_id: int = 65535,
    scene_id: str = "",
    origin: tuple[int, int] = (0, 0),
    source: str = "mask_file",
) -> RegionRecord:
    """Per-class counts under the mask, primary class and richness.

    ``mask`` and ``labels`` cover the same pixels; ``origin`` places them in
    scene coordinates. Ties for the primary class go to the lowest id.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != labels.shape:
        raise ValueError(f"mask {mask.shape} and labels {labels.shape} differ in size")
    local = mask_to_bbox(mask)
    bbox = Window(origin[0] + local.row, origin[1] + local.col, local.h, local.w)
    rs, cs = local.slices()
    vals = np.asarray(labels[rs, cs])[mask[rs, cs]]
    vals = vals[vals != ignore_id]
    if vals.size == 0:
        raise EmptyRegionError(f"region at {bbox} holds only ignored pixels")
    if int(vals.max()) >= num_classes:
        raise ValueError(f"label {int(vals.max())} out of range for {num_classes} classes")
    counts = np.bincount(vals, minlength=num_classes)
    return RegionRecord(
        scene_id=scene_id,
        bbox=bbox,
        class_counts=tuple(int(c) for c in counts),
        primary_class=int(np.argmax(counts)),
        richness=int(np.count_nonzero(counts)),
        source=source,
    )


def prompt_grid(height: int, width: int, points_per_side: int) -> np.ndarray:
    """Uniform (row, col) prompt points, one at the centre of each grid cell."""
    if points_per_side < 1:
        raise ValueError("points_per_side must be >= 1")
    ys = ((np.arange(points_per_side) + 0.5) * height / points_per_side).astype(np.int64)
    xs = ((np.arange(points_per_side) + 0.5) * width / points_per_side).astype(np.int64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def synthetic_masks(
    labels: np.ndarray,
    num_classes: int,
    ignore_id: int = 65535,
    min_pixels: int = 16,
    grow: int = 2,
) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
    """Stand-in for a segmenter: one mask per connected component of each class.

    Components are dilated by ``grow`` pixels so masks pick up a rim of
    neighbouring classes, as object masks on real imagery do. Yields
    ``(origin, local_mask)`` pairs in (class, component) order.
    """
    labels = np.asarray(labels)
    height, width = labels.shape
    structure = np.ones((3, 3), dtype=bool)
    for c in range(num_classes):
        comp, n = ndimage.label(labels == c)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        for idx, sl in enumerate(ndimage.find_objects(comp), start=1):
            if sl is None or sizes[idx] < min_pixels:
                continue
            r0 = max(0, sl[0].start - grow)
            r1 = min(height, sl[0].stop + grow)
            c0 = max(0, sl[1].start - grow)
            c1 = min(width, sl[1].stop + grow)
            local = comp[r0:r1, c0:c1] == idx
            if grow > 0:
                local = ndimage.binary_dilation(local, structure=structure, iterations=grow)
            yield (r0, c0), local


def synthetic_regions(raster: LabeledRaster, num_classes: int, **kwargs) -> list[RegionRecord]:
    labels = np.asarray(raster.labels)
    records = []
    for (r0, c0), local in synthetic_masks(labels, num_classes, raster.ignore_id, **kwargs):
        lab = labels[r0 : r0 + local.shape[0], c0 : c0 + local.shape[1]]
        try:
            records.append(
                annotate_region(
                    local, lab, num_classes, raster.ignore_id, raster.scene_id, (r0, c0), "synthetic"
                )
            )
        except EmptyRegionError:
            continue
    return records


def regions_from_masks(
    raster: LabeledRaster, masks: Iterable[np.ndarray], num_classes: int
) -> list[RegionRecord]:
    """Annotate full-plane masks against a scene, reading only each mask's box."""
    records = []
    for mask in masks:
        if mask.shape != raster.shape:
            raise ValueError(f"mask {mask.shape} does not match scene {raster.shape}")
        box = mask_to_bbox(mask)
        rs, cs = box.slices()
        records.append(
            annotate_region(
                mask[rs, cs],
                np.asarray(raster.labels[rs, cs]),
                num_classes,
                raster.ignore_id,
                raster.scene_id,
                (box.row, box.col),
            )
        )
    return records


# --------------------------------------------------------------------------
# ranking


def rank_key(record: RegionRecord, shares: np.ndarray):
    b = record.bbox
    return (
        float(shares[record.primary_class]),
        -record.richness,
        record.scene_id,
        b.row,
        b.col,
        b.h,
        b.w,
        record.class_counts,
    )


def rank_regions(records: Iterable[RegionRecord], global_hist: ClassHistogram) -> list[RegionRecord]:
    """Tail-first total order; ``rank`` is reassigned 0..n-1.

    Key: global share of the primary class (ascending), richness
    (descending), then scene id and box geometry.
    """
    records = list(records)
    shares = global_hist.shares()
    for r in records:
        if r.primary_class >= global_hist.num_classes:
            raise ValueError(f"primary class {r.primary_class} not covered by histogram")
    ordered = sorted(records, key=lambda r: rank_key(r, shares))
    return [replace(r, rank=i) for i, r in enumerate(ordered)]


# --------------------------------------------------------------------------
# sampling


def _raster_for(rasters, record: RegionRecord) -> LabeledRaster:
    if isinstance(rasters, LabeledRaster):
        return rasters
    return rasters[record.scene_id]


def _check_train_size(raster: LabeledRaster, cfg: SamplerConfig) -> None:
    if cfg.train_h > raster.height or cfg.train_w > raster.width:
        raise ValueError(
            f"train size ({cfg.train_h}, {cfg.train_w}) larger than raster {raster.shape}"
        )


def _axis_start(b0: int, b_len: int, t_len: int, limit: int, rng, random: bool) -> int:
    if b_len >= t_len and random:
        return b0 + int(rng.integers(0, b_len - t_len + 1))
    return min(b0, limit - t_len)


def gsd_window(
    height: int,
    width: int,
    bbox: Window,
    train_h: int,
    train_w: int,
    rng: np.random.Generator,
    placement: str = "random",
) -> Window:
    """Train-size window for an unresampled crop of ``bbox``.

    Per axis: a uniform offset inside the box when the box is long enough
    (``placement="random"``), otherwise start at the box's top-left edge,
    moved back to stay in bounds. ``placement="top_left"`` always uses the
    box edge.
    """
    random = placement == "random"
    row = _axis_start(bbox.row, bbox.h, train_h, height, rng, random)
    col = _axis_start(bbox.col, bbox.w, train_w, width, rng, random)
    return Window(row, col, train_h, train_w)


def sample_region_gsd(
    raster: LabeledRaster, record: RegionRecord, cfg: SamplerConfig, rng: np.random.Generator
) -> Tile:
    _check_train_size(raster, cfg)
    win = gsd_window(raster.height, raster.width, record.bbox, cfg.train_h, cfg.train_w, rng,
                     cfg.gsd_placement)
    tile = read_window(raster, win)
    tile.provenance = Provenance.SRRTA_GSD
    tile.meta["rank"] = record.rank
    return tile


def sample_region_resize(raster: LabeledRaster, record: RegionRecord, cfg: SamplerConfig) -> Tile:
    tile = resize_tile(read_window(raster, record.bbox), cfg.train_h, cfg.train_w)
    tile.provenance = Provenance.SRRTA_RESIZE
    tile.meta["rank"] = record.rank
    return tile


def wg_probabilities(n: int, arr_len_factor: float = DEFAULT_ARR_LEN_FACTOR) -> np.ndarray:
    """p_i proportional to 1 / (i + n * arr_len_factor), i = 0..n-1."""
    if n < 1:
        raise ValueError("need at least one record")
    offset = n * arr_len_factor
    weights = 1.0 / (np.arange(n, dtype=np.float64) + offset)
    return weights / weights.sum()


def wg_draw_indices(
    n: int, x: int, arr_len_factor: float, rng: np.random.Generator
) -> np.ndarray:
    """``x`` rank indices drawn with replacement under ``wg_probabilities``."""
    if x < 1:
        raise ValueError(f"number of draws must be >= 1, got {x}")
    return rng.choice(n, size=x, replace=True, p=wg_probabilities(n, arr_len_factor))


def wg_rescro(
    records: Sequence[RegionRecord],
    x: int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    rasters,
) -> list[Tile]:
    """Weighted draws over ranked records; each draw yields a resized and a cropped tile.

    ``rasters`` is one scene or a mapping scene_id -> scene. Returns 2*x tiles.
    """
    if not records:
        raise ValueError("wg_rescro needs at least one record")
    draw_rng, crop_root = rng.spawn(2)
    picks = wg_draw_indices(len(records), x, cfg.arr_len_factor, draw_rng)
    tiles = []
    for idx, crop_rng in zip(picks, crop_root.spawn(x)):
        rec = records[int(idx)]
        raster = _raster_for(rasters, rec)
        tiles.append(sample_region_resize(raster, rec, cfg))
        tiles.append(sample_region_gsd(raster, rec, cfg, crop_rng))
    return tiles


def sample_regions(
    records: Sequence[RegionRecord], cfg: SamplerConfig, rng: np.random.Generator, rasters
) -> list[Tile]:
    """Tiles for the given ranked records under ``cfg.mode``.

    For the per-region modes, record j uses its own child generator so the
    result for the first j records does not depend on how many follow.
    """
    if cfg.mode is SampleMode.WG_RESCRO:
        return wg_rescro(records, cfg.draws, cfg, rng, rasters) if records else []
    tiles = []
    for rec, child in zip(records, rng.spawn(len(records))):
        raster = _raster_for(rasters, rec)
        if cfg.mode is SampleMode.GSD_PRESERVING:
            tiles.append(sample_region_gsd(raster, rec, cfg, child))
        else:
            tiles.append(sample_region_resize(raster, rec, cfg))
    return tiles


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    scene_id: str
    tiles: list[Tile]
    records: list[RegionRecord]
    shortfall: int = 0
    diagnostics: BatchDiagnostics | None = None


def compose_batch(
    raster: LabeledRaster,
    ranked: Sequence[RegionRecord],
    msar_cfg: MsarConfig,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    num_classes: int | None = None,
    rasters: Mapping[str, LabeledRaster] | None = None,
) -> Batch:
    """MSAR sample of ``raster`` followed by samples of the top ranked regions.

    ``ranked`` is already in priority order (per scene, or dataset-wide
    together with ``rasters`` for cross-scene records). In wg_rescro mode the
    MSAR part is skipped and the batch holds 2 * draws weighted tiles.
    """
    msar_rng, region_rng = rng.spawn(2)
    source = rasters if rasters is not None else raster
    if sampler_cfg.mode is SampleMode.WG_RESCRO:
        chosen = list(ranked)
        tiles = sample_regions(chosen, sampler_cfg, region_rng, source)
        shortfall = 0 if chosen else 2 * sampler_cfg.draws
    else:
        chosen = list(ranked[: sampler_cfg.top_k])
        tiles = sample_msar(raster, msar_cfg, msar_rng).tiles
        tiles += sample_regions(chosen, sampler_cfg, region_rng, source)
        shortfall = sampler_cfg.top_k - len(chosen)
    batch = Batch(raster.scene_id, tiles, chosen, shortfall)
    if num_classes is not None:
        batch.diagnostics = batch_diagnostics(tiles, num_classes)
    return batch


def random_crop_batch(
    raster: LabeledRaster, n_tiles: int, tile_h: int, tile_w: int, rng: np.random.Generator
) -> list[Tile]:
    """Baseline: ``n_tiles`` uniformly placed crops, no resampling."""
    tiles = []
    for _ in range(n_tiles):
        row = int(rng.integers(0, raster.height - tile_h + 1))
        col = int(rng.integers(0, raster.width - tile_w + 1))
        tiles.append(read_window(raster, Window(row, col, tile_h, tile_w)))
    return tiles


def rotate_records(ranked: Sequence[RegionRecord], top_k: int, batch_index: int) -> list[RegionRecord]:
    """Dataset-level selection: batch b takes ranks b*top_k .. b*top_k+top_k-1, cycling."""
    n = len(ranked)
    if n == 0:
        return []
    if n <= top_k:
        return list(ranked)
    start = (batch_index * top_k) % n
    return [ranked[(start + j) % n] for j in range(top_k)]


# --------------------------------------------------------------------------
# mask archives and region index files

MASK_MAGIC = b"MSK1"
MASK_HEADER = struct.Struct("<4sII4x")


def write_masks(path, masks: Iterable[np.ndarray]) -> int:
    """One record per mask: 16-byte header then the row-major mask, bit-packed MSB first."""
    n = 0
    with open(path, "wb") as f:
        for mask in masks:
            mask = np.asarray(mask, dtype=bool)
            h, w = mask.shape
            f.write(MASK_HEADER.pack(MASK_MAGIC, h, w))
            f.write(np.packbits(mask.ravel()).tobytes())
            n += 1
    return n


def iter_masks(path) -> Iterator[np.ndarray]:
    with open(path, "rb") as f:
        index = 0
        while True:
            head = f.read(MASK_HEADER.size)
            if not head:
                return
            if len(head) < MASK_HEADER.size:
                raise FormatError(f"truncated mask header {index}", path=path)
            magic, h, w = MASK_HEADER.unpack(head)
            if magic != MASK_MAGIC:
                raise FormatError(f"mask {index}: bad magic {magic!r}", path=path)
            nbytes = (h * w + 7) // 8
            payload = f.read(nbytes)
            if len(payload) != nbytes:
                raise FormatError(f"mask {index}: truncated payload", path=path)
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=h * w)
            yield bits.reshape(h, w).astype(bool)
            index += 1


INDEX_COLUMNS = ["scene_id", "row", "col", "h", "w", "primary", "richness", "rank"]


def write_region_index(path, records: Iterable[RegionRecord]) -> None:
    records = list(records)
    n_classes = len(records[0].class_counts) if records else 0
    header = "#" + "\t".join(INDEX_COLUMNS + [f"count_{c}" for c in range(n_classes)])
    lines = [header]
    for r in records:
        b = r.bbox
        fields = [r.scene_id, b.row, b.col, b.h, b.w, r.primary_class, r.richness, r.rank]
        lines.append("\t".join(str(v) for v in [*fields, *r.class_counts]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_region_index(path) -> list[RegionRecord]:
    records = []
    n_classes = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < len(INDEX_COLUMNS) + 1:
                raise FormatError(f"expected at least {len(INDEX_COLUMNS) + 1} fields", lineno, path)
            try:
                nums = [int(v) for v in parts[1:]]
                bbox = Window(*nums[0:4])
            except ValueError as exc:
                raise FormatError(str(exc), lineno, path) from None
            counts = tuple(nums[7:])
            if n_classes is None:
                n_classes = len(counts)
            elif len(counts) != n_classes:
                raise FormatError(f"expected {n_classes} class counts, got {len(counts)}", lineno, path)
            primary, richness, rank = nums[4:7]
            if not 0 <= primary < len(counts) or any(c < 0 for c in counts):
                raise FormatError("primary class or counts out of range", lineno, path)
            records.append(RegionRecord(parts[0], bbox, counts, primary, richness, rank))
    return records
