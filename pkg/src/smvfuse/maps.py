"""Dense and sparse depth containers shared across the pipeline.

Depth values are z-depth in meters unless a function says otherwise.
A stored value of 0 marks an invalid/missing pixel (the sensor-depth
convention); maps fed into fusion must be strictly positive everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DenseDepthMap:
    """Per-pixel depth in meters, row-major (height, width)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth map contains non-finite values")
        if np.any(v < 0):
            raise ValueError("depth map contains negative values")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        """Boolean mask of pixels carrying a measurement (value > 0)."""
        return self.values > 0

    def require_positive(self, what: str = "depth map") -> None:
        if np.any(self.values <= 0):
            raise ValueError(f"{what} must be strictly positive everywhere")


@dataclass(frozen=True)
class DepthGradients:
    """Per-pixel depth gradient, meters per pixel, same shape as the source."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self) -> None:
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.shape != dy.shape or dx.ndim != 2:
            raise ValueError("gradient components must share a 2-D shape")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("gradients contain non-finite values")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)


@dataclass(frozen=True)
class SparseDepthSet:
    """Selected multi-view anchor points: unique pixels with metric depth.

    ``pixels`` is (N, 2) int [u, v] (column, row); ``depths`` is (N,)
    meters, positive and finite.
    """

    pixels: np.ndarray
    depths: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        d = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if px.shape[0] != d.shape[0]:
            raise ValueError("pixel and depth counts differ")
        if px.shape[0] != len({(int(u), int(v)) for u, v in px}):
            raise ValueError("duplicate pixels in sparse depth set")
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("sparse depths must be positive and finite")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "depths", d)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])


def resize_bilinear(values: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resampling onto a width x height grid.

    Corner-aligned: output corners sample input corners exactly, so the
    map  x_src = x_dst * (w_in - 1) / (w_out - 1)  is used per axis.
    """
    src = np.asarray(values, dtype=np.float64)
    h_in, w_in = src.shape
    if (w_in, h_in) == (width, height):
        return src.copy()
    if width < 1 or height < 1:
        raise ValueError("target size must be positive")
    xs = np.linspace(0.0, w_in - 1.0, width)
    ys = np.linspace(0.0, h_in - 1.0, height)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w_in - 2) if w_in > 1 else np.zeros(width, np.int64)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h_in - 2) if h_in > 1 else np.zeros(height, np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]
