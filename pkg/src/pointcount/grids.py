"""Dense array primitives: heatmaps, boxes, ellipses and the pooling /
normalization operations shared by both pipelines.

Arrays are stored as float32; reductions accumulate in float64 to bound
drift. All functions are pure and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

EPS_NORM = 1e-12


def as_tensor32(data, shape=None) -> np.ndarray:
    """Validate and convert to a finite float32 ndarray.

    Raises NumericError on NaN/Inf, DataError on a shape mismatch.
    """
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise DataError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


@dataclass
class BBox:
    """Axis-aligned box in image pixels, max edges exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DataError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def union(self, other: "BBox") -> "BBox":
        return BBox(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def gap_to(self, other: "BBox") -> float:
        """Separation between two boxes: largest per-axis clearance
        (negative when the boxes overlap on both axes)."""
        gx = max(self.x_min - other.x_max, other.x_min - self.x_max)
        gy = max(self.y_min - other.y_max, other.y_min - self.y_max)
        return max(gx, gy)


@dataclass
class Ellipse:
    """Pointer ellipse: center in image pixels, semi-axes from a diagonal
    covariance (sigma_x, sigma_y)."""

    cx: float
    cy: float
    sx: float
    sy: float

    def __post_init__(self):
        if self.sx <= 0 or self.sy <= 0:
            raise NumericError(f"non-positive semi-axes in {self}")

    @property
    def area(self) -> float:
        return float(np.pi * self.sx * self.sy)


@dataclass
class Heatmap:
    """Non-negative 2D grid with a mapping to image pixel coordinates.

    ``grid[i, j]`` covers the image rectangle of size (scale_x, scale_y)
    whose center is ((j + 0.5) * scale_x, (i + 0.5) * scale_y).
    """

    grid: np.ndarray
    image_width: int
    image_height: int
    scale_x: float
    scale_y: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise DataError(f"heatmap grid must be a non-empty 2D array, got shape {self.grid.shape}")
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise DataError("heatmap scale factors must be positive")
        h, w = self.grid.shape
        if abs(w * self.scale_x - self.image_width) > self.scale_x + 1e-6:
            raise DataError("grid width x scale_x does not cover image width")
        if abs(h * self.scale_y - self.image_height) > self.scale_y + 1e-6:
            raise DataError("grid height x scale_y does not cover image height")
        if not np.all(np.isfinite(self.grid)):
            raise NumericError("heatmap contains NaN or Inf")

    @classmethod
    def from_grid(cls, grid, image_width=None, image_height=None) -> "Heatmap":
        """Wrap a 2D array; image size defaults to the grid size (scale 1)."""
        grid = np.asarray(grid, dtype=np.float32)
        if grid.ndim != 2 or grid.size == 0:
            raise DataError("need a non-empty 2D array")
        h, w = grid.shape
        iw = w if image_width is None else image_width
        ih = h if image_height is None else image_height
        return cls(grid, iw, ih, iw / w, ih / h)

    @property
    def total(self) -> float:
        return float(np.sum(self.grid, dtype=np.float64))


def channel_stack(maps, image_width=None, image_height=None) -> Heatmap:
    """Sum a list of same-sized 2D maps into one heatmap grid."""
    if len(maps) == 0:
        raise DataError("channel_stack needs at least one map")
    first = np.asarray(maps[0], dtype=np.float32)
    acc = np.zeros(first.shape, dtype=np.float64)
    for m in maps:
        m = np.asarray(m, dtype=np.float32)
        if m.shape != first.shape:
            raise DataError(f"map shape {m.shape} does not match {first.shape}")
        acc += m
    return Heatmap.from_grid(acc.astype(np.float32), image_width, image_height)


def normalize_subtract_scaled_mean(hm: Heatmap, k: float = 2.0) -> Heatmap:
    """Subtract k times the global mean and clamp at zero."""
    if k < 0:
        raise DataError("k must be non-negative")
    mean = float(np.mean(hm.grid, dtype=np.float64))
    out = np.maximum(hm.grid - np.float32(k * mean), 0.0).astype(np.float32)
    return Heatmap(out, hm.image_width, hm.image_height, hm.scale_x, hm.scale_y)


def global_max_pool(fmaps: np.ndarray) -> np.ndarray:
    """Per-channel spatial max of a [C, H, W] tensor."""
    fmaps = np.asarray(fmaps)
    if fmaps.ndim != 3:
        raise DataError(f"expected rank-3 [C,H,W] tensor, got rank {fmaps.ndim}")
    if fmaps.shape[1] == 0 or fmaps.shape[2] == 0:
        raise DataError("zero-sized channel")
    return np.max(fmaps, axis=(1, 2)).astype(np.float32)


def global_avg_pool(fmaps: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a [C, H, W] tensor (float64 accumulation)."""
    fmaps = np.asarray(fmaps)
    if fmaps.ndim != 3:
        raise DataError(f"expected rank-3 [C,H,W] tensor, got rank {fmaps.ndim}")
    if fmaps.shape[1] == 0 or fmaps.shape[2] == 0:
        raise DataError("zero-sized channel")
    return np.mean(fmaps, axis=(1, 2), dtype=np.float64).astype(np.float32)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit Euclidean norm; zero-ish vectors pass through unchanged."""
    v = np.asarray(v, dtype=np.float32)
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm <= EPS_NORM:
        return v.copy()
    return (v / np.float32(norm)).astype(np.float32)


def bilinear_resize(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling of a 2D array with half-pixel-center alignment."""
    arr = np.asarray(arr, dtype=np.float32)
    if out_w <= 0 or out_h <= 0:
        raise DataError("target size must be positive")
    in_h, in_w = arr.shape
    if (out_w, out_h) == (in_w, in_h):
        return arr.copy()

    # Source coordinate of each output pixel center, clamped to the valid
    # sample range so edges replicate rather than extrapolate.
    def axis_coords(n_out, n_in):
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        i0 = np.floor(c).astype(np.int64)
        i0 = np.minimum(i0, n_in - 2) if n_in > 1 else np.zeros_like(i0)
        frac = c - i0
        return i0, frac

    if in_h == 1 and in_w == 1:
        return np.full((out_h, out_w), arr[0, 0], dtype=np.float32)
    x0, fx = axis_coords(out_w, in_w)
    y0, fy = axis_coords(out_h, in_h)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    a64 = arr.astype(np.float64)
    top = a64[y0[:, None], x0[None, :]] * (1 - fx)[None, :] + a64[y0[:, None], x1[None, :]] * fx[None, :]
    bot = a64[y1[:, None], x0[None, :]] * (1 - fx)[None, :] + a64[y1[:, None], x1[None, :]] * fx[None, :]
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(np.float32)


def upscale_heatmap(hm: Heatmap, width: int, height: int) -> Heatmap:
    """Resample the grid to one cell per target pixel."""
    grid = bilinear_resize(hm.grid, width, height)
    grid = np.maximum(grid, 0.0)
    return Heatmap(grid, width, height, 1.0, 1.0)
