"""Slide tiling: foreground detection, grid enumeration and mask stitching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.filters import threshold_otsu

__all__ = [
    "SlideImage",
    "TileGrid",
    "compute_foreground_mask",
    "pad_slide",
    "tile_slide",
    "tile_mask",
    "stitch_masks",
    "read_image",
    "write_label_mask",
    "read_label_mask",
]


@dataclass
class SlideImage:
    pixels: np.ndarray
    microns_per_pixel: float = 1.0
    slide_id: str = "slide"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"slide pixels must be HxWx3, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("slide pixels must be uint8")
        if self.microns_per_pixel <= 0:
            raise ValueError("microns_per_pixel must be positive")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TileGrid:
    """Tiling geometry of one slide.

    Node ids are assigned to foreground cells in row-major order, so
    ``coords[i]`` is the ``(row, col)`` cell of node ``i``.
    """

    slide_id: str
    rows: int
    cols: int
    patch_size_px: int
    foreground: np.ndarray
    height_px: int | None = None
    width_px: int | None = None
    tile_index: dict = field(init=False)
    coords: np.ndarray = field(init=False)

    def __post_init__(self):
        fg = np.asarray(self.foreground, dtype=bool)
        if fg.shape != (self.rows, self.cols):
            raise ValueError(f"foreground shape {fg.shape} != grid {(self.rows, self.cols)}")
        self.foreground = fg
        if self.height_px is None:
            self.height_px = self.rows * self.patch_size_px
        if self.width_px is None:
            self.width_px = self.cols * self.patch_size_px
        rr, cc = np.nonzero(fg)  # row-major
        self.coords = np.stack([rr, cc], axis=1).astype(np.int64)
        self.tile_index = {(int(r), int(c)): i for i, (r, c) in enumerate(self.coords)}

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "rows": self.rows,
            "cols": self.cols,
            "patch_size_px": self.patch_size_px,
            "height_px": self.height_px,
            "width_px": self.width_px,
            "foreground": [int(b) for b in self.foreground.ravel()],
            "coords": self.coords.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TileGrid":
        rows, cols = int(doc["rows"]), int(doc["cols"])
        fg = np.asarray(doc["foreground"], dtype=bool).reshape(rows, cols)
        grid = cls(
            slide_id=doc["slide_id"],
            rows=rows,
            cols=cols,
            patch_size_px=int(doc["patch_size_px"]),
            foreground=fg,
            height_px=doc.get("height_px"),
            width_px=doc.get("width_px"),
        )
        if "coords" in doc and grid.coords.tolist() != [list(c) for c in doc["coords"]]:
            raise ValueError("stored coords disagree with foreground bit list")
        return grid

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TileGrid":
        return cls.from_json(json.loads(Path(path).read_text()))


def _grid_shape(height: int, width: int, patch_size_px: int) -> tuple[int, int]:
    return -(-height // patch_size_px), -(-width // patch_size_px)


def hsv_saturation(pixels: np.ndarray) -> np.ndarray:
    """HSV saturation ``(max - min) / max`` per pixel; 0 where ``max == 0``."""
    hi = pixels.max(axis=-1).astype(np.float64)
    lo = pixels.min(axis=-1).astype(np.float64)
    return np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)


def compute_foreground_mask(
    slide: SlideImage,
    patch_size_px: int,
    saturation_threshold_mode: str = "otsu",
    min_tissue_fraction: float = 0.25,
    fixed_threshold: float = 0.1,
) -> np.ndarray:
    """Flag grid cells whose tissue fraction reaches ``min_tissue_fraction``.

    A pixel counts as tissue when its HSV saturation exceeds the threshold.
    Edge cells measure the fraction over their unpadded pixels only.
    """
    if patch_size_px <= 0:
        raise ValueError("patch_size_px must be positive")
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ValueError("min_tissue_fraction must lie in [0, 1]")
    if slide.pixels.size == 0:
        raise ValueError("no pixels")

    sat = hsv_saturation(slide.pixels)
    if saturation_threshold_mode == "otsu":
        # a constant image has no Otsu split
        thr = float(fixed_threshold) if sat.min() == sat.max() else float(threshold_otsu(sat))
    elif saturation_threshold_mode == "fixed":
        thr = float(fixed_threshold)
    else:
        raise ValueError(f"unknown saturation_threshold_mode {saturation_threshold_mode!r}")

    tissue = sat > thr
    rows, cols = _grid_shape(slide.height, slide.width, patch_size_px)
    padded = np.zeros((rows * patch_size_px, cols * patch_size_px), dtype=np.float64)
    valid = np.zeros_like(padded)
    padded[: slide.height, : slide.width] = tissue
    valid[: slide.height, : slide.width] = 1.0
    shape = (rows, patch_size_px, cols, patch_size_px)
    counts = padded.reshape(shape).sum(axis=(1, 3))
    totals = valid.reshape(shape).sum(axis=(1, 3))
    return counts >= min_tissue_fraction * totals


def pad_slide(pixels: np.ndarray, patch_size_px: int, fill: int = 255) -> np.ndarray:
    h, w = pixels.shape[:2]
    rows, cols = _grid_shape(h, w, patch_size_px)
    pad = [(0, rows * patch_size_px - h), (0, cols * patch_size_px - w)]
    pad += [(0, 0)] * (pixels.ndim - 2)
    return np.pad(pixels, pad, mode="constant", constant_values=fill)


def _cut(raster: np.ndarray, grid: TileGrid) -> np.ndarray:
    p = grid.patch_size_px
    out = np.empty((grid.n_nodes, p, p) + raster.shape[2:], dtype=raster.dtype)
    for i, (r, c) in enumerate(grid.coords):
        out[i] = raster[r * p : (r + 1) * p, c * p : (c + 1) * p]
    return out


def tile_slide(slide: SlideImage, mask: np.ndarray, patch_size_px: int) -> tuple[TileGrid, np.ndarray]:
    """Cut the foreground cells of ``slide`` into patches ordered by node id.

    Returns the grid and an ``(N, P, P, 3)`` uint8 stack.
    """
    rows, cols = _grid_shape(slide.height, slide.width, patch_size_px)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (rows, cols):
        raise ValueError(f"mask shape {mask.shape} does not match slide grid {(rows, cols)}")
    grid = TileGrid(
        slide_id=slide.slide_id,
        rows=rows,
        cols=cols,
        patch_size_px=patch_size_px,
        foreground=mask,
        height_px=slide.height,
        width_px=slide.width,
    )
    return grid, _cut(pad_slide(slide.pixels, patch_size_px, 255), grid)


def tile_mask(labels: np.ndarray, grid: TileGrid) -> np.ndarray:
    """Cut a slide-level label raster into per-node patch masks (pad value 0)."""
    labels = np.asarray(labels)
    if labels.shape != (grid.height_px, grid.width_px):
        raise ValueError(f"label raster {labels.shape} does not match slide {(grid.height_px, grid.width_px)}")
    return _cut(pad_slide(labels, grid.patch_size_px, 0), grid)


def stitch_masks(per_tile_masks, grid: TileGrid) -> np.ndarray:
    masks = np.asarray(per_tile_masks)
    p = grid.patch_size_px
    if len(masks) != grid.n_nodes:
        raise ValueError(f"got {len(masks)} tile masks for {grid.n_nodes} nodes")
    if grid.n_nodes and masks.shape[1:] != (p, p):
        raise ValueError(f"tile masks must be {p}x{p}, got {masks.shape[1:]}")
    dtype = masks.dtype if grid.n_nodes else np.uint8
    out = np.zeros((grid.rows * p, grid.cols * p), dtype=dtype)
    for m, (r, c) in zip(masks, grid.coords):
        out[r * p : (r + 1) * p, c * p : (c + 1) * p] = m
    return out[: grid.height_px, : grid.width_px]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_label_mask(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_label_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: label raster must be single-channel 8-bit, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)
