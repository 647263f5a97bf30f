"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .tiling import SlideImage


def check_slide(x, name: str = "slide") -> SlideImage:
    if isinstance(x, SlideImage):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected an HxWx3 raster, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"{name}: pixels must be 8-bit")
        arr = arr.astype(np.uint8)
    if arr.size == 0:
        raise ValueError(f"{name}: no pixels")
    return SlideImage(arr, 1.0, name)


def check_label_mask(y, shape, n_classes: int, name: str = "mask") -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name}: label raster {arr.shape} does not match slide {tuple(shape)}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name}: labels must be integers")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"{name}: labels must lie in 0..{n_classes - 1}")
    return arr.astype(np.uint8)


def check_slides(X) -> list[SlideImage]:
    if isinstance(X, (SlideImage, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 4):
        X = [X]
    slides = [check_slide(x, f"slide_{i}") for i, x in enumerate(X)]
    if not slides:
        raise ValueError("no slides given")
    return slides


def check_slides_masks(X, y, n_classes: int):
    slides = check_slides(X)
    masks = list(y) if not isinstance(y, np.ndarray) or y.ndim == 3 else [y]
    if len(masks) != len(slides):
        raise ValueError(f"{len(slides)} slides but {len(masks)} masks")
    masks = [check_label_mask(m, s.pixels.shape[:2], n_classes, s.slide_id) for s, m in zip(slides, masks)]
    return slides, masks


def check_features(features, n_nodes: int, feature_dim: int, name: str = "features") -> np.ndarray:
    arr = np.asarray(features, dtype=np.float32)
    if arr.shape != (n_nodes, feature_dim):
        raise ValueError(f"{name}: expected ({n_nodes}, {feature_dim}) features, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite feature values")
    return arr
