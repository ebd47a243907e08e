"""Geometry-adaptive density maps from head annotations.

Each head becomes a Gaussian whose bandwidth is ``beta`` times the mean
distance to its ``k`` nearest annotated neighbours. Kernels are truncated,
clipped to the image and renormalised so every head contributes exactly one
person of mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class InsufficientNeighbors(ValueError):
    """Raised when a k-NN distance is requested for fewer than two points."""


@dataclass(frozen=True)
class KernelParams:
    beta: float = 0.3
    k_neighbors: int = 10
    fallback_sigma: float = 15.0
    truncation_radius_sigmas: float = 3.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if not self.fallback_sigma > 0:
            raise ValueError(f"fallback_sigma must be positive, got {self.fallback_sigma}")
        if not self.truncation_radius_sigmas >= 1:
            raise ValueError(
                f"truncation_radius_sigmas must be >= 1, got {self.truncation_radius_sigmas}"
            )


@dataclass
class HeadAnnotations:
    """Head centres in pixel coordinates plus the ``(width, height)`` of their image."""

    points: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be an M x 2 array, got shape {pts.shape}")
        self.points = pts
        width, height = self.image_size
        self.image_size = (int(width), int(height))
        bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"point {i} at {tuple(pts[i])} lies outside a {width}x{height} image")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    grid: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def mean_knn_distance(points, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``min(k, M-1)`` nearest others."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise InsufficientNeighbors(f"need at least 2 points for neighbour distances, got {len(pts)}")
    kk = min(k, len(pts) - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    # column 0 is the point itself; ties at distance 0 with duplicates are harmless
    return np.sort(dist, axis=1)[:, 1:].mean(axis=1)


def sigma_for_heads(d_bars, params: KernelParams) -> np.ndarray:
    """Per-head bandwidth ``beta * d_bar``; ``None`` means no neighbours exist."""
    if d_bars is None:
        return np.full(1, params.fallback_sigma)
    d = np.asarray(d_bars, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("neighbour distances must be finite and non-negative")
    return params.beta * d


def head_sigmas(points: np.ndarray, params: KernelParams) -> np.ndarray:
    if len(points) == 0:
        return np.zeros(0)
    try:
        d_bars = mean_knn_distance(points, params.k_neighbors)
    except InsufficientNeighbors:
        d_bars = None
    return sigma_for_heads(d_bars, params)


def _pixel_centre(coord: float, extent: int) -> int:
    return min(max(int(math.floor(coord + 0.5)), 0), extent - 1)


def render_density_map(ann: HeadAnnotations, params: KernelParams = KernelParams()) -> DensityMap:
    width, height = ann.image_size
    grid = np.zeros((height, width), dtype=np.float64)
    sigmas = head_sigmas(ann.points, params)
    for (x, y), sigma in zip(ann.points, sigmas):
        cx, cy = _pixel_centre(x, width), _pixel_centre(y, height)
        if sigma <= 0:
            # coincident annotations: the Gaussian collapses to a delta
            grid[cy, cx] += 1.0
            continue
        r = int(math.ceil(params.truncation_radius_sigmas * sigma))
        x0, x1 = max(cx - r, 0), min(cx + r, width - 1)
        y0, y1 = max(cy - r, 0), min(cy + r, height - 1)
        gx = np.exp(-((np.arange(x0, x1 + 1) - cx) ** 2) / (2 * sigma * sigma))
        gy = np.exp(-((np.arange(y0, y1 + 1) - cy) ** 2) / (2 * sigma * sigma))
        kernel = np.outer(gy, gx)
        grid[y0:y1 + 1, x0:x1 + 1] += kernel / kernel.sum()
    return DensityMap(grid)


def downsample_sum(dmap: DensityMap, factor: int) -> DensityMap:
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    h, w = dmap.grid.shape
    if h % factor or w % factor:
        raise ValueError(f"density map {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return DensityMap(dmap.grid.copy())
    blocks = dmap.grid.reshape(h // factor, factor, w // factor, factor)
    return DensityMap(blocks.sum(axis=(1, 3)))


def count_from_density(dmap) -> float:
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(grid.sum(dtype=np.float64))
