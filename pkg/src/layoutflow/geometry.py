"""Normalized-box geometry: dense corner sampling, Fourier features,
token-grid crops, density maps and IoU.

All functions are pure; boxes live in normalized [0, 1] image coordinates
with origin at the top-left, x to the right, y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box (x1, y1, w, h) in normalized coordinates."""

    x1: float
    y1: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x1}, {self.y1})")
        if self.x1 + self.w > 1 + _EDGE_TOL or self.y1 + self.h > 1 + _EDGE_TOL:
            raise ValueError(f"box exceeds the unit square: {self}")

    @property
    def x2(self) -> float:
        return self.x1 + self.w

    @property
    def y2(self) -> float:
        return self.y1 + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.w, self.h)


def dense_sample(box: BBox, k: int) -> np.ndarray:
    """Uniformly spaced k*k anchor points of a box.

    Point (kx, ky) sits at (x1 + kx*w/k, y1 + ky*h/k) for kx, ky in 0..k-1,
    so the grid starts at the top-left corner and stops short of the
    bottom-right edge.  Rows are emitted in row-major order (ky outer).

    Returns:
        float64 array of shape (k*k, 2) holding (x, y) pairs.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    kx = np.arange(k, dtype=np.float64)
    xs = box.x1 + kx * (box.w / k)
    ys = box.y1 + kx * (box.h / k)
    gx, gy = np.meshgrid(xs, ys)  # gy varies along rows
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def fourier_embed(points: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sinusoidal features of sampled points.

    For each scalar coordinate c the features are
    [sin(2^j * pi * c), cos(2^j * pi * c)] for j = 0..n_freqs-1, concatenated
    point-by-point, x before y, frequencies innermost.  Output length is
    points.shape[0] * 2 * 2 * n_freqs.
    """
    if n_freqs < 1:
        raise ValueError(f"n_freqs must be >= 1, got {n_freqs}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must have shape (n, 2), got {pts.shape}")
    freqs = (2.0 ** np.arange(n_freqs)) * math.pi  # (F,)
    ang = pts[:, :, None] * freqs  # (n, 2, F)
    feat = np.stack([np.sin(ang), np.cos(ang)], axis=3)  # (n, 2, F, 2)
    return feat.reshape(-1)


def fourier_dim(k: int, n_freqs: int) -> int:
    return k * k * 2 * 2 * n_freqs


@dataclass(frozen=True)
class CropRegion:
    """Half-open cell rectangle [col_start, col_end) x [row_start, row_end)
    on a token grid."""

    col_start: int
    row_start: int
    col_end: int
    row_end: int

    def __post_init__(self):
        if not (0 <= self.col_start < self.col_end and 0 <= self.row_start < self.row_end):
            raise ValueError(f"degenerate crop {self}")

    @property
    def n_cols(self) -> int:
        return self.col_end - self.col_start

    @property
    def n_rows(self) -> int:
        return self.row_end - self.row_start

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    def contains_cell(self, col: int, row: int) -> bool:
        return self.col_start <= col < self.col_end and self.row_start <= row < self.row_end

    def token_indices(self, grid_w: int) -> list[int]:
        """Flat row-major token indices (row * grid_w + col) of the crop."""
        return [
            r * grid_w + c
            for r in range(self.row_start, self.row_end)
            for c in range(self.col_start, self.col_end)
        ]

    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.col_start, self.row_start, self.col_end, self.row_end)


def bbox_to_crop(box: BBox, grid_w: int, grid_h: int) -> CropRegion:
    """Smallest cell rectangle covering a normalized box.

    The start edge rounds down, the end edge rounds up, and the result is
    clamped to the grid while always keeping at least one cell, so every
    positive-area box owns a non-empty crop.
    """
    if grid_w < 1 or grid_h < 1:
        raise ValueError(f"grid must be positive, got {grid_w}x{grid_h}")
    col_start = min(max(math.floor(box.x1 * grid_w), 0), grid_w - 1)
    row_start = min(max(math.floor(box.y1 * grid_h), 0), grid_h - 1)
    col_end = min(max(math.ceil(box.x2 * grid_w), col_start + 1), grid_w)
    row_end = min(max(math.ceil(box.y2 * grid_h), row_start + 1), grid_h)
    return CropRegion(col_start, row_start, col_end, row_end)


def density_map(crops: list[CropRegion], grid_w: int, grid_h: int) -> np.ndarray:
    """Per-cell count of covering crops, shape (grid_h, grid_w), int64."""
    counts = np.zeros((grid_h, grid_w), dtype=np.int64)
    for crop in crops:
        if crop.col_end > grid_w or crop.row_end > grid_h:
            raise ValueError(f"crop {crop} exceeds grid {grid_w}x{grid_h}")
        counts[crop.row_start : crop.row_end, crop.col_start : crop.col_end] += 1
    return counts


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)
