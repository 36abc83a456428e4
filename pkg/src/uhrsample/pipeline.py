"""Multi-scene pipelines behind the command line.

Every function here reads inputs from disk, writes its artifacts into
``out_dir`` and returns a small summary. Randomness is derived from the
user seed plus (scene index, item index) keys, so results do not depend on
the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np

from . import formats
from .errors import FormatError
from .evaluate import (
    ConfusionMatrix,
    WindowPlan,
    evaluate_planes,
    iou_miou,
    plan_windows,
    stitch,
)
from .formats import ManifestEntry, open_manifest_scene, read_manifest
from .msar import MsarConfig, sample_msar
from .raster import Provenance, Tile
from .regions import (
    RegionRecord,
    SampleMode,
    SamplerConfig,
    compose_batch,
    iter_masks,
    mask_to_bbox,
    rank_regions,
    read_region_index,
    regions_from_masks,
    rotate_records,
    sample_regions,
    synthetic_masks,
    synthetic_regions,
    write_masks,
    write_region_index,
)
from .stats import ClassHistogram, pixel_histogram, tail_classes, uniform_probe_diagnostics
from .synth import write_synth_scene

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence([seed, *keys])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> Iterator[R]:
    """Map in input order; with workers > 1 the calls run on a thread pool."""
    if workers <= 1 or len(items) <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, items)


def write_config_echo(out_dir: Path, params: dict) -> Path:
    path = Path(out_dir) / "config.txt"
    lines = []
    for key in sorted(params):
        value = params[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _tsv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(str(v) for v in row) + "\n")


# --------------------------------------------------------------------------
# synth / stats


def run_synth(out_dir, seed: int, height: int, width: int, freqs: Sequence[float],
              count: int = 1, channels: int = 3, gsd: float = 1.0, workers: int = 1) -> Path:
    out_dir = Path(out_dir)
    entries = [
        ManifestEntry(f"scene_{i:03d}", f"scene_{i:03d}.lrs", height, width, gsd)
        for i in range(count)
    ]

    def make(i: int) -> None:
        scene_seed = int(derive_seed(seed, i).generate_state(1, np.uint64)[0])
        write_synth_scene(out_dir / entries[i].path, scene_seed, height, width, freqs,
                          channels=channels, gsd=gsd)

    list(ordered_map(make, list(range(count)), workers))
    manifest = out_dir / "manifest.tsv"
    formats.write_manifest(manifest, entries)
    return manifest


def dataset_histogram(manifest, num_classes: int, workers: int = 1) -> ClassHistogram:
    entries = read_manifest(manifest)

    def hist(entry: ManifestEntry) -> ClassHistogram:
        return pixel_histogram(open_manifest_scene(manifest, entry), num_classes)

    total = ClassHistogram.zeros(num_classes)
    for h in ordered_map(hist, entries, workers):
        total = total + h
    return total


def write_histogram(path, hist: ClassHistogram) -> None:
    _tsv(path, ["class", "count"], ((c, int(n)) for c, n in enumerate(hist.counts)))


def read_histogram(path) -> ClassHistogram:
    counts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if lineno == 1 or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                cls, n = int(parts[0]), int(parts[1])
            except (ValueError, IndexError):
                raise FormatError("expected 'class<TAB>count'", lineno, path) from None
            if cls != len(counts):
                raise FormatError(f"class ids must be consecutive, got {cls}", lineno, path)
            counts.append(n)
    return ClassHistogram(np.array(counts, dtype=np.int64))


@dataclass
class StatsResult:
    hist: ClassHistogram
    tail: list[int]


def run_stats(out_dir, manifest, num_classes: int, threshold: float = 0.05,
              workers: int = 1) -> StatsResult:
    out_dir = Path(out_dir)
    hist = dataset_histogram(manifest, num_classes, workers)
    shares = hist.shares()
    tail = tail_classes(hist, threshold)
    _tsv(
        out_dir / "stats.tsv",
        ["class", "count", "share", "tail"],
        ((c, int(hist.counts[c]), f"{shares[c]:.6f}", int(c in tail)) for c in range(num_classes)),
    )
    cum = 0.0
    rows = []
    for c in sorted(range(num_classes), key=lambda c: (shares[c], c)):
        cum += shares[c]
        rows.append((c, f"{shares[c]:.6f}", f"{cum:.6f}", int(c in tail)))
    _tsv(out_dir / "tail.tsv", ["class", "share", "cum_share", "tail"], rows)
    return StatsResult(hist, tail)


# --------------------------------------------------------------------------
# sampling


PROVENANCE_COLUMNS = ["scene_id", "k", "row", "col", "h", "w"]


def _provenance_row(scene_id: str, tile: Tile) -> list:
    win = tile.window
    return [scene_id, tile.scale, win.row, win.col, win.h, win.w]


def run_msar_sample(out_dir, manifest, anchor: tuple[int, int], scales: Sequence[int],
                    count: int, seed: int, workers: int = 1) -> int:
    out_dir = Path(out_dir)
    entries = read_manifest(manifest)
    cfg = MsarConfig(anchor[0], anchor[1], tuple(scales), seed)

    def scene_tiles(item):
        idx, entry = item
        raster = open_manifest_scene(manifest, entry)
        tiles = []
        for j in range(count):
            tiles += sample_msar(raster, cfg, derive_rng(seed, idx, j)).tiles
        return entry.scene_id, tiles

    n = 0
    with open(out_dir / "msar.lta", "wb") as arc, \
            open(out_dir / "msar_provenance.tsv", "w", encoding="utf-8") as log:
        log.write("\t".join(PROVENANCE_COLUMNS) + "\n")
        for scene_id, tiles in ordered_map(scene_tiles, list(enumerate(entries)), workers):
            n += formats.write_tiles(arc, tiles)
            for t in tiles:
                log.write("\t".join(str(v) for v in _provenance_row(scene_id, t)) + "\n")
    return n


def build_scene_regions(manifest, entry: ManifestEntry, num_classes: int,
                        masks_dir=None, min_pixels: int = 16, grow: int = 2) -> list[RegionRecord]:
    raster = open_manifest_scene(manifest, entry)
    mask_file = Path(masks_dir) / f"{entry.scene_id}.msk" if masks_dir else None
    if mask_file is not None and mask_file.exists():
        return regions_from_masks(raster, iter_masks(mask_file), num_classes)
    return synthetic_regions(raster, num_classes, min_pixels=min_pixels, grow=grow)


def run_regions_build(out_dir, manifest, num_classes: int, masks_dir=None,
                      min_pixels: int = 16, grow: int = 2, save_masks: bool = False,
                      workers: int = 1) -> list[RegionRecord]:
    out_dir = Path(out_dir)
    entries = read_manifest(manifest)
    hist = dataset_histogram(manifest, num_classes, workers)
    write_histogram(out_dir / "histogram.tsv", hist)

    def build(entry):
        records = build_scene_regions(manifest, entry, num_classes, masks_dir, min_pixels, grow)
        return rank_regions(records, hist)

    ranked = []
    for entry, records in zip(entries, ordered_map(build, entries, workers)):
        ranked += records
        if save_masks and any(r.source == "synthetic" for r in records):
            masks = _full_masks(manifest, entry, records, min_pixels, grow)
            write_masks(out_dir / f"{entry.scene_id}.msk", masks)
    write_region_index(out_dir / "regions.tsv", ranked)
    return ranked


def _full_masks(manifest, entry: ManifestEntry, records: Sequence[RegionRecord],
                min_pixels: int, grow: int):
    """Full-plane masks for synthetic records, regenerated from the label plane."""
    raster = open_manifest_scene(manifest, entry)
    labels = np.asarray(raster.labels)
    boxes = {r.bbox for r in records}
    n_classes = len(records[0].class_counts) if records else 0
    for (r0, c0), local in synthetic_masks(labels, n_classes, raster.ignore_id, min_pixels, grow):
        if mask_to_bbox(local, (r0, c0)) not in boxes:
            continue
        full = np.zeros(raster.shape, dtype=bool)
        full[r0 : r0 + local.shape[0], c0 : c0 + local.shape[1]] = local
        yield full


def load_index(index_path, histogram_path=None) -> tuple[list[RegionRecord], ClassHistogram]:
    index_path = Path(index_path)
    records = read_region_index(index_path)
    hist_path = Path(histogram_path) if histogram_path else index_path.parent / "histogram.tsv"
    return records, read_histogram(hist_path)


def records_by_scene(records: Iterable[RegionRecord]) -> dict[str, list[RegionRecord]]:
    out: dict[str, list[RegionRecord]] = {}
    for r in records:
        out.setdefault(r.scene_id, []).append(r)
    return out


def run_regions_sample(out_dir, manifest, index, sampler: SamplerConfig, seed: int,
                       histogram=None, workers: int = 1) -> int:
    out_dir = Path(out_dir)
    entries = read_manifest(manifest)
    records, hist = load_index(index, histogram)
    per_scene = records_by_scene(records)

    def scene_tiles(item):
        idx, entry = item
        ranked = rank_regions(per_scene.get(entry.scene_id, []), hist)
        if sampler.mode is not SampleMode.WG_RESCRO:
            ranked = ranked[: sampler.top_k]
        raster = open_manifest_scene(manifest, entry)
        return entry.scene_id, sample_regions(ranked, sampler, derive_rng(seed, idx), raster)

    n = 0
    with open(out_dir / "regions.lta", "wb") as arc, \
            open(out_dir / "regions_provenance.tsv", "w", encoding="utf-8") as log:
        log.write("\t".join(PROVENANCE_COLUMNS + ["provenance", "rank"]) + "\n")
        for scene_id, tiles in ordered_map(scene_tiles, list(enumerate(entries)), workers):
            n += formats.write_tiles(arc, tiles)
            for t in tiles:
                row = _provenance_row(scene_id, t) + [t.provenance.name.lower(), t.meta["rank"]]
                log.write("\t".join(str(v) for v in row) + "\n")
    return n


BATCH_LOG_COLUMNS = ["batch", "archive", "scene_id", "tile", "provenance", "k",
                     "row", "col", "h", "w", "rank", "shortfall"]


def run_batch(out_dir, manifest, index, msar_cfg: MsarConfig, sampler: SamplerConfig,
              count: int, seed: int, dataset_level: bool = False, histogram=None,
              workers: int = 1) -> list[Path]:
    """``count`` batches per scene, one archive per batch, in scene-then-batch order."""
    out_dir = Path(out_dir)
    entries = read_manifest(manifest)
    records, hist = load_index(index, histogram)
    per_scene = {sid: rank_regions(rs, hist) for sid, rs in records_by_scene(records).items()}
    global_ranked = rank_regions(records, hist) if dataset_level else None
    rasters = {e.scene_id: open_manifest_scene(manifest, e) for e in entries}

    jobs = [(i, b) for i in range(len(entries)) for b in range(count)]

    def make(job):
        i, b = job
        entry = entries[i]
        if dataset_level:
            ranked = rotate_records(global_ranked, sampler.top_k, i * count + b)
        else:
            ranked = per_scene.get(entry.scene_id, [])
        return compose_batch(rasters[entry.scene_id], ranked, msar_cfg, sampler,
                             derive_rng(seed, i, b), rasters=rasters)

    paths = []
    with open(out_dir / "batches.tsv", "w", encoding="utf-8") as log:
        log.write("\t".join(BATCH_LOG_COLUMNS) + "\n")
        for n, batch in enumerate(ordered_map(make, jobs, workers)):
            path = out_dir / f"batch_{n:06d}.lta"
            formats.write_archive(path, batch.tiles)
            paths.append(path)
            for t_idx, t in enumerate(batch.tiles):
                w = t.window
                log.write("\t".join(str(v) for v in [
                    n, path.name, batch.scene_id, t_idx, t.provenance.name.lower(), t.scale,
                    w.row, w.col, w.h, w.w, t.meta.get("rank", -1), batch.shortfall,
                ]) + "\n")
    return paths


# --------------------------------------------------------------------------
# report / eval


REPORT_FIXED = ["archive", "tiles", "B", "imbalance_ratio"]


def report(archives: Sequence, num_classes: int) -> list[dict]:
    """Per-archive class shares, imbalance ratio and uniform-probe balance diagnostics."""
    rows = []
    for path in archives:
        tiles = formats.read_archive(path)
        diag = uniform_probe_diagnostics(pixel_histogram(tiles, num_classes))
        rows.append({
            "archive": Path(path).name,
            "tiles": len(tiles),
            "diagnostics": diag,
        })
    return rows


def write_report(path, rows: Sequence[dict], num_classes: int) -> None:
    header = list(REPORT_FIXED)
    header += [f"share_{c}" for c in range(num_classes)]
    header += [f"residual_{c}" for c in range(num_classes)]
    header += [f"grad_{c}" for c in range(num_classes)]

    def fmt(x: float) -> str:
        return "nan" if math.isnan(x) else repr(float(x))

    lines = []
    for r in rows:
        d = r["diagnostics"]
        lines.append([r["archive"], r["tiles"], d.B, fmt(d.imbalance_ratio),
                      *(fmt(v) for v in d.shares), *(fmt(v) for v in d.residual),
                      *(fmt(v) for v in d.grad)])
    _tsv(path, header, lines)


def batch_archives(batch_dir) -> list[Path]:
    return sorted(Path(batch_dir).glob("batch_*.lta"))


def stitch_archive(pred_path, plan: WindowPlan, num_classes: int, policy: str) -> np.ndarray:
    tiles = [t.labels for t in formats.iter_archive(pred_path)]
    return stitch(tiles, plan, policy, num_classes)


def run_eval(pred_path, gt_path, num_classes: int, window=(512, 512), stride=(341, 341),
             policy: str = "avg_logits", exclude_background: bool = False):
    gt = formats.open_scene(gt_path)
    pred_path = Path(pred_path)
    if pred_path.suffix == ".lta":
        plan = plan_windows(gt.height, gt.width, window, stride)
        pred = stitch_archive(pred_path, plan, num_classes, policy)
    else:
        pred = formats.open_scene(pred_path).labels
    cm: ConfusionMatrix = evaluate_planes(gt, pred, num_classes)
    return cm, iou_miou(cm, exclude=(0,) if exclude_background else ())
