"""On-disk formats: ``.lrs`` scenes, scene manifests and tile archives.

Scene file layout (little endian)::

    magic "LRS1" | H u32 | W u32 | channels u8 | pad 3 | gsd f64 | ignore_id u16 | pad 6
    image plane, row-major, channel-interleaved u8
    label plane, row-major u16

A tile archive is a plain concatenation of records, each made of the same
32-byte header, one provenance byte (``scale << 4 | provenance``) and the
two planes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import FormatError
from .raster import DEFAULT_IGNORE_ID, LabeledRaster, Provenance, Tile

MAGIC = b"LRS1"
HEADER = struct.Struct("<4sIIB3xdH6x")
HEADER_SIZE = HEADER.size
assert HEADER_SIZE == 32


@dataclass(frozen=True)
class SceneHeader:
    height: int
    width: int
    channels: int
    gsd: float
    ignore_id: int = DEFAULT_IGNORE_ID

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC, self.height, self.width, self.channels, self.gsd, self.ignore_id
        )

    @classmethod
    def unpack(cls, buf: bytes, path=None) -> SceneHeader:
        if len(buf) < HEADER_SIZE:
            raise FormatError(f"truncated header ({len(buf)} bytes)", path=path)
        magic, h, w, c, gsd, ignore_id = HEADER.unpack(buf[:HEADER_SIZE])
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", path=path)
        if h == 0 or w == 0 or c == 0:
            raise FormatError(f"empty raster dimensions ({h}, {w}, {c})", path=path)
        if not gsd > 0:
            raise FormatError(f"non-positive gsd {gsd}", path=path)
        return cls(h, w, c, gsd, ignore_id)

    @property
    def image_bytes(self) -> int:
        return self.height * self.width * self.channels

    @property
    def label_bytes(self) -> int:
        return self.height * self.width * 2

    @property
    def file_size(self) -> int:
        return HEADER_SIZE + self.image_bytes + self.label_bytes


def read_header(path) -> SceneHeader:
    with open(path, "rb") as f:
        return SceneHeader.unpack(f.read(HEADER_SIZE), path=path)


def write_scene(path, raster: LabeledRaster) -> None:
    header = SceneHeader(
        raster.height, raster.width, raster.channels, raster.gsd, raster.ignore_id
    )
    with SceneWriter(path, header) as out:
        step = max(1, (1 << 22) // max(1, raster.width * raster.channels))
        for r in range(0, raster.height, step):
            out.write_rows(r, raster.image[r : r + step], raster.labels[r : r + step])


def open_scene(path, scene_id: str | None = None) -> LabeledRaster:
    """Memory-map a scene file. Pixel data is paged in only when sliced."""
    header = read_header(path)
    size = os.path.getsize(path)
    if size != header.file_size:
        raise FormatError(
            f"file is {size} bytes, header implies {header.file_size}", path=path
        )
    h, w, c = header.height, header.width, header.channels
    image = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER_SIZE, shape=(h, w, c))
    labels = np.memmap(
        path, dtype="<u2", mode="r", offset=HEADER_SIZE + header.image_bytes, shape=(h, w)
    )
    return LabeledRaster(
        image=image,
        labels=labels,
        gsd=header.gsd,
        ignore_id=header.ignore_id,
        scene_id=Path(path).stem if scene_id is None else scene_id,
    )


def load_scene(path, scene_id: str | None = None) -> LabeledRaster:
    """Read a whole scene into memory. Prefer ``open_scene`` for large files."""
    mm = open_scene(path, scene_id)
    return LabeledRaster(
        image=np.array(mm.image),
        labels=np.array(mm.labels),
        gsd=mm.gsd,
        ignore_id=mm.ignore_id,
        scene_id=mm.scene_id,
    )


class SceneWriter:
    """Writes a scene file band by band through a writable memory map."""

    def __init__(self, path, header: SceneHeader):
        self.path = Path(path)
        self.header = header
        with open(self.path, "wb") as f:
            f.write(header.pack())
            f.truncate(header.file_size)
        h, w, c = header.height, header.width, header.channels
        self._image = np.memmap(
            self.path, dtype=np.uint8, mode="r+", offset=HEADER_SIZE, shape=(h, w, c)
        )
        self._labels = np.memmap(
            self.path,
            dtype="<u2",
            mode="r+",
            offset=HEADER_SIZE + header.image_bytes,
            shape=(h, w),
        )

    def write_rows(self, row: int, image: np.ndarray, labels: np.ndarray) -> None:
        if image.ndim == 2:
            image = image[:, :, None]
        n = labels.shape[0]
        self._image[row : row + n] = image
        self._labels[row : row + n] = labels

    def close(self) -> None:
        if self._image is not None:
            self._image.flush()
            self._labels.flush()
            self._image = self._labels = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    path: str
    height: int
    width: int
    gsd: float


MANIFEST_HEADER = "#scene_id\tpath\tH\tW\tgsd"


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    lines = [MANIFEST_HEADER]
    for e in entries:
        if "\t" in e.scene_id or "\n" in e.scene_id or "\t" in e.path:
            raise ValueError(f"tab or newline in manifest field: {e!r}")
        lines.append(f"{e.scene_id}\t{e.path}\t{e.height}\t{e.width}\t{e.gsd!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(f"expected 5 fields, got {len(parts)}", lineno, path)
            sid, p, h, w, gsd = parts
            try:
                entry = ManifestEntry(sid, p, int(h), int(w), float(gsd))
            except ValueError as exc:
                raise FormatError(str(exc), lineno, path) from None
            if entry.height <= 0 or entry.width <= 0 or not entry.gsd > 0:
                raise FormatError("non-positive size or gsd", lineno, path)
            if sid in seen:
                raise FormatError(f"duplicate scene_id {sid!r}", lineno, path)
            seen.add(sid)
            entries.append(entry)
    return entries


def resolve_scene_path(manifest_path, entry: ManifestEntry) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def open_manifest_scene(manifest_path, entry: ManifestEntry) -> LabeledRaster:
    raster = open_scene(resolve_scene_path(manifest_path, entry), scene_id=entry.scene_id)
    if raster.shape != (entry.height, entry.width):
        raise FormatError(
            f"scene {entry.scene_id} is {raster.shape}, manifest says "
            f"({entry.height}, {entry.width})",
            path=manifest_path,
        )
    return raster


# --------------------------------------------------------------------------
# tile archive


def _tile_record(tile: Tile) -> bytes:
    h, w = tile.shape
    image = tile.image if tile.image.ndim == 3 else tile.image[:, :, None]
    if not 1 <= tile.scale <= 15:
        raise ValueError(f"tile scale {tile.scale} does not fit the provenance byte")
    header = SceneHeader(h, w, image.shape[2], tile.gsd, tile.ignore_id)
    prov = bytes([(tile.scale << 4) | int(tile.provenance)])
    return b"".join(
        [
            header.pack(),
            prov,
            np.ascontiguousarray(image, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(tile.labels, dtype="<u2").tobytes(),
        ]
    )


def write_tiles(f: BinaryIO, tiles: Iterable[Tile]) -> int:
    n = 0
    for tile in tiles:
        f.write(_tile_record(tile))
        n += 1
    return n


def write_archive(path, tiles: Iterable[Tile]) -> int:
    with open(path, "wb") as f:
        return write_tiles(f, tiles)


def iter_archive(path) -> Iterator[Tile]:
    with open(path, "rb") as f:
        index = 0
        while True:
            buf = f.read(HEADER_SIZE + 1)
            if not buf:
                return
            if len(buf) < HEADER_SIZE + 1:
                raise FormatError(f"truncated record {index}", path=path)
            header = SceneHeader.unpack(buf, path=path)
            code = buf[HEADER_SIZE]
            try:
                prov = Provenance(code & 0x0F)
            except ValueError:
                raise FormatError(f"record {index}: bad provenance byte {code}", path=path)
            scale = code >> 4
            if scale == 0:
                raise FormatError(f"record {index}: zero scale", path=path)
            img = f.read(header.image_bytes)
            lab = f.read(header.label_bytes)
            if len(img) != header.image_bytes or len(lab) != header.label_bytes:
                raise FormatError(f"record {index}: truncated payload", path=path)
            yield Tile(
                window=None,
                image=np.frombuffer(img, dtype=np.uint8).reshape(
                    header.height, header.width, header.channels
                ),
                labels=np.frombuffer(lab, dtype="<u2")
                .reshape(header.height, header.width)
                .astype(np.uint16),
                scale=scale,
                provenance=prov,
                gsd=header.gsd,
                ignore_id=header.ignore_id,
            )
            index += 1


def read_archive(path) -> list[Tile]:
    return list(iter_archive(path))
