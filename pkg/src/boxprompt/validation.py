"""Input validation helpers for the estimator-facing API."""
from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeMismatch
from .geometry import TightBox


def check_images(X) -> np.ndarray:
    """Coerce to a float32 (n, H, W) stack of finite grayscale images."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected (n, H, W) images, got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ShapeMismatch("images must have positive height and width")
    if not np.isfinite(arr).all():
        raise DataError("image values must be finite")
    return arr


def check_boxes(y, n: int, shape: tuple[int, int]) -> list[TightBox]:
    """Coerce to a list of n in-bounds TightBox labels."""
    arr = np.asarray(y)
    if arr.shape != (n, 4):
        raise ShapeMismatch(f"expected ({n}, 4) boxes, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.allclose(arr, np.round(arr)):
            raise DataError("box corners must be integers")
        arr = np.round(arr).astype(np.int64)
    boxes = []
    for row in arr:
        box = TightBox(*(int(v) for v in row))
        if not box.fits(shape):
            raise ShapeMismatch(f"box {box.as_tuple()} exceeds image shape {shape}")
        boxes.append(box)
    return boxes


def check_masks(y, n: int, shape: tuple[int, int]) -> np.ndarray:
    """Coerce to a uint8 (n, H, W) stack of binary masks."""
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != (n, *shape):
        raise ShapeMismatch(f"expected ({n}, {shape[0]}, {shape[1]}) masks, got {arr.shape}")
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise DataError(f"masks must be binary, found values {uniq[:8]}")
    return arr.astype(np.uint8)


def is_mask_labels(y, n: int) -> bool:
    """Disambiguate fit labels: (n, H, W) masks vs (n, 4) boxes."""
    arr = np.asarray(y)
    return arr.ndim == 3 or (arr.ndim == 2 and arr.shape != (n, 4))


def check_probability_grid(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"probability map must be 2-D, got {a.shape}")
    if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
        raise DataError("probability values must be finite and within [0, 1]")
    return a
