"""Masks, tight boxes, region partitions, and tightness bands.

Coordinate convention everywhere: row-major grids, origin at the top-left,
boxes as inclusive integer pixel indices (rmin, cmin, rmax, cmax).  All
functions are pure and thread-safe.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoxOutOfBounds, EmptyMask, InvalidWidth


@dataclass(frozen=True)
class TightBox:
    """Axis-aligned box with inclusive corners."""

    rmin: int
    cmin: int
    rmax: int
    cmax: int

    def __post_init__(self):
        if not (0 <= self.rmin <= self.rmax and 0 <= self.cmin <= self.cmax):
            raise BoxOutOfBounds(f"degenerate box corners {self.as_tuple()}")

    @property
    def height(self) -> int:
        return self.rmax - self.rmin + 1

    @property
    def width(self) -> int:
        return self.cmax - self.cmin + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.rmin, self.cmin, self.rmax, self.cmax)

    def fits(self, shape: tuple[int, int]) -> bool:
        return self.rmax < shape[0] and self.cmax < shape[1]


@dataclass
class RegionPartition:
    """Inside/outside split induced by a box on a grid.

    `inside + outside == 1` pointwise; `inside_count` is the box area.
    """

    inside: np.ndarray
    outside: np.ndarray
    inside_count: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.inside.shape


@dataclass(frozen=True)
class Band:
    """One tightness segment: an axis-aligned run of box pixels.

    The threshold is the minimum probability mass the band must carry,
    i.e. min(band_width, true extent along the banded axis).
    """

    rmin: int
    cmin: int
    rmax: int
    cmax: int
    threshold: float
    orientation: str  # "h" = group of rows, "v" = group of columns

    def indicator(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.rmin : self.rmax + 1, self.cmin : self.cmax + 1] = True
        return out

    @property
    def size(self) -> int:
        return (self.rmax - self.rmin + 1) * (self.cmax - self.cmin + 1)


@dataclass
class SegmentSet:
    """All horizontal and vertical bands covering a box."""

    segments: list[Band] = field(default_factory=list)
    band_width: int = 5

    def __iter__(self):
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)


def tight_box_from_mask(mask: np.ndarray) -> TightBox:
    """Minimal axis-aligned box containing every foreground pixel.

    Raises EmptyMask when the mask has no foreground.
    """
    grid = np.asarray(mask)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("mask has no foreground pixel")
    return TightBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def partition_regions(box: TightBox, shape: tuple[int, int]) -> RegionPartition:
    """Split a grid into the box interior and its complement."""
    if not box.fits(shape):
        raise BoxOutOfBounds(f"box {box.as_tuple()} exceeds grid {shape}")
    inside = np.zeros(shape, dtype=bool)
    inside[box.rmin : box.rmax + 1, box.cmin : box.cmax + 1] = True
    return RegionPartition(inside=inside, outside=~inside, inside_count=box.area)


def build_segments(box: TightBox, w: int) -> SegmentSet:
    """Bands of width w tiling the box, one pass per orientation.

    Consecutive non-overlapping groups of w rows (columns) spanning the
    box's full extent in the other axis.  A trailing remainder band of
    width w' < w is kept with threshold w'.
    """
    if w < 1:
        raise InvalidWidth(f"band width must be >= 1, got {w}")
    bands: list[Band] = []
    for r in range(box.rmin, box.rmax + 1, w):
        r_end = min(r + w - 1, box.rmax)
        bands.append(
            Band(r, box.cmin, r_end, box.cmax, float(r_end - r + 1), "h")
        )
    for c in range(box.cmin, box.cmax + 1, w):
        c_end = min(c + w - 1, box.cmax)
        bands.append(
            Band(box.rmin, c, box.rmax, c_end, float(c_end - c + 1), "v")
        )
    return SegmentSet(segments=bands, band_width=w)


def map_box_to_grid(
    box: TightBox, from_shape: tuple[int, int], to_shape: tuple[int, int]
) -> TightBox:
    """Rescale a box between grids, never shrinking its covered area.

    Min corners are floored and max corners ceiled (on the continuous
    pixel-edge coordinates), so the mapped box contains the image of the
    original one.  Pure integer arithmetic; exact for any shapes.
    """
    h1, w1 = from_shape
    h2, w2 = to_shape
    rmin = (box.rmin * h2) // h1
    cmin = (box.cmin * w2) // w1
    # ceil((i+1) * s2 / s1) - 1, as integer ceil division
    rmax = -((-(box.rmax + 1) * h2) // h1) - 1
    cmax = -((-(box.cmax + 1) * w2) // w1) - 1
    rmax = min(max(rmax, rmin), h2 - 1)
    cmax = min(max(cmax, cmin), w2 - 1)
    return TightBox(rmin, cmin, rmax, cmax)


def shift_box(box: TightBox, dr: int, dc: int, shape: tuple[int, int]) -> TightBox:
    """Translate a box by (dr, dc) and clip it to a grid.

    Used when a crop/pad moves image content; a box fully outside the
    grid raises BoxOutOfBounds.
    """
    rmin, rmax = box.rmin + dr, box.rmax + dr
    cmin, cmax = box.cmin + dc, box.cmax + dc
    if rmax < 0 or cmax < 0 or rmin >= shape[0] or cmin >= shape[1]:
        raise BoxOutOfBounds("box falls entirely outside the target grid")
    return TightBox(
        max(rmin, 0), max(cmin, 0), min(rmax, shape[0] - 1), min(cmax, shape[1] - 1)
    )
