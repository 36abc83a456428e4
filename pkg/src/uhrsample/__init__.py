"""Long-tail sampling and evaluation engine for ultra-high-resolution labelled rasters."""

__version__ = "0.1.0"

from .raster import LabeledRaster, Provenance, Tile, Window, read_window, resize_tile  # noqa: E402
from .stats import ClassHistogram, pixel_histogram  # noqa: E402

__all__ = [
    "LabeledRaster",
    "Provenance",
    "Tile",
    "Window",
    "read_window",
    "resize_tile",
    "ClassHistogram",
    "pixel_histogram",
]
