"""Content-adaptive fusion of a dense depth prior with sparse anchors.

A dense single-view depth map ``s`` is corrected by a sparse set of
trusted multi-view depths ``m_uv`` at pixels (u, v) in Omega.  Each
output pixel is a weighted interpolation

    f_ij = sum_{(u,v) in Omega}  W  *  (m_uv + (s_ij - s_uv))

i.e. every anchor votes for "s shifted by my local discrepancy", and
the votes are blended with weights that model whether the anchor lies
on the same local structure as the target pixel.  The raw weight is a
product of four factors:

    w1 = exp(-dist(p, q) / sigma1)                        proximity
    w2 = 1/(|dx_q - dx_p| + sigma2)
         * 1/(|dy_q - dy_p| + sigma2)                     gradient similarity
    w3 = exp(-|s_p + dx_p (u_q - u_p) - s_q|) + sigma3    planarity in x
    w4 = exp(-|s_p + dy_p (v_q - v_p) - s_q|) + sigma3    planarity in y

sigma3 keeps a minimum weight on every anchor so the product never
vanishes.  Per target pixel the raw weights are normalized with the
minimum subtracted first,

    W = (w - min w) / sum(w - min w)

which makes the weakest anchor contribute exactly zero and the rest
sum to one.  If all raw weights are equal the denominator is zero and
the pixel falls back to uniform weights (counted in the result flags).

``fuse_reference`` is the normative semantics: plain scalar loops over
pixels and anchors.  ``fuse`` is the production path; it may reorder
arithmetic but must agree with the reference to 1e-12 relative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maps import DenseDepthMap, DepthGradients, SparseDepthSet

ALL_FACTORS = (1, 2, 3, 4)

# Pixel rows per chunk in the vectorized path; bounds peak memory at
# roughly chunk * |Omega| * 8 bytes per temporary.
_CHUNK_PIXELS = 4096


@dataclass(frozen=True)
class FusionParams:
    """Weight-shape parameters; defaults are the tuned values (15, 0.1, 1e-3)."""

    sigma1: float = 15.0
    sigma2: float = 0.1
    sigma3: float = 1e-3

    def __post_init__(self) -> None:
        if not (self.sigma1 > 0 and self.sigma2 > 0 and self.sigma3 > 0):
            raise ValueError("all fusion sigmas must be positive")


@dataclass(frozen=True)
class FusionResult:
    """Fused dense values plus degenerate-case flags.

    values is a plain array, not a DenseDepthMap: wildly disagreeing
    anchors can drive a blended value to zero or below, and the policy
    for that (clamp, drop, keep) belongs to the caller.
    """

    values: np.ndarray
    # "weighted" normal path, "single_point" global offset from one anchor,
    # "no_fusion" empty anchor set (output is the input map).
    mode: str
    uniform_fallback_pixels: int = 0


def depth_gradients(s: DenseDepthMap) -> DepthGradients:
    """Depth gradient per axis: central differences, one-sided at borders."""
    if s.height < 2 or s.width < 2:
        raise ValueError("gradients need a map of at least 2x2")
    return DepthGradients(
        dx=np.gradient(s.values, axis=1), dy=np.gradient(s.values, axis=0)
    )


def weight_w1(p, q, sigma1: float) -> float:
    """Proximity factor exp(-dist/sigma1) for pixels p, q given as (u, v)."""
    du = p[0] - q[0]
    dv = p[1] - q[1]
    return math.exp(-math.sqrt(du * du + dv * dv) / sigma1)


def weight_w2(grad_p, grad_q, sigma2: float) -> float:
    """Gradient-similarity factor; grad_* are (dx, dy) in meters/pixel."""
    return 1.0 / (abs(grad_q[0] - grad_p[0]) + sigma2) / (
        abs(grad_q[1] - grad_p[1]) + sigma2
    )


def weight_w3_w4(
    s: DenseDepthMap, grads: DepthGradients, p, q, sigma3: float
) -> tuple[float, float]:
    """Planarity factors: extrapolate p's tangent plane to q, per axis.

    p and q are integer (u, v) pixels of the map.  Each factor is
    exp(-|residual|) + sigma3, so it decays with the extrapolation
    error but never drops below sigma3.
    """
    up, vp = p
    uq, vq = q
    s_p = s.values[vp, up]
    s_q = s.values[vq, uq]
    rx = s_p + grads.dx[vp, up] * (uq - up) - s_q
    ry = s_p + grads.dy[vp, up] * (vq - vp) - s_q
    return math.exp(-abs(rx)) + sigma3, math.exp(-abs(ry)) + sigma3


def raw_weight(
    p,
    q,
    s: DenseDepthMap,
    grads: DepthGradients,
    params: FusionParams,
    factors=ALL_FACTORS,
) -> float:
    """Non-normalized influence of anchor q on pixel p: the factor product."""
    w = 1.0
    if 1 in factors:
        w *= weight_w1(p, q, params.sigma1)
    if 2 in factors:
        up, vp = p
        uq, vq = q
        w *= weight_w2(
            (grads.dx[vp, up], grads.dy[vp, up]),
            (grads.dx[vq, uq], grads.dy[vq, uq]),
            params.sigma2,
        )
    if 3 in factors or 4 in factors:
        w3, w4 = weight_w3_w4(s, grads, p, q, params.sigma3)
        if 3 in factors:
            w *= w3
        if 4 in factors:
            w *= w4
    return w


def normalize_weights(raw) -> tuple[np.ndarray, bool]:
    """Min-subtracted normalization of one pixel's raw weights over Omega.

    Returns (weights, uniform_fallback).  Weights are >= 0 and sum to 1;
    the minimum-weight anchor gets exactly 0.  When every raw weight is
    equal the denominator vanishes and uniform weights are returned with
    the fallback flag set.

    Requires at least 2 anchors (with a single anchor the subtraction
    would zero it out; fuse handles that case separately).
    """
    w = np.asarray(raw, dtype=np.float64)
    if w.size < 2:
        raise ValueError("normalization needs at least 2 weights")
    shifted = w - w.min()
    denom = shifted.sum()
    if denom == 0.0:
        return np.full(w.size, 1.0 / w.size), True
    return shifted / denom, False


def _validate_fuse_inputs(
    s: DenseDepthMap, omega: SparseDepthSet, factors=ALL_FACTORS
) -> None:
    unknown = set(factors) - set(ALL_FACTORS)
    if unknown:
        raise ValueError(f"unknown weight factors {sorted(unknown)}; valid: 1-4")
    s.require_positive("single-view depth")
    if len(omega) and (
        np.any(omega.pixels[:, 0] >= s.width)
        or np.any(omega.pixels[:, 1] >= s.height)
        or np.any(omega.pixels < 0)
    ):
        raise ValueError("anchor pixel outside the depth map")


def fuse_reference(
    s: DenseDepthMap,
    omega: SparseDepthSet,
    params: FusionParams,
    factors=ALL_FACTORS,
) -> FusionResult:
    """Naive per-pixel, per-anchor fusion; the normative semantics.

    O(P * |Omega|) scalar loops.  Use fuse() for real workloads.
    """
    _validate_fuse_inputs(s, omega, factors)
    if len(omega) == 0:
        return FusionResult(s.values.copy(), "no_fusion")
    if len(omega) == 1:
        u, v = omega.pixels[0]
        offset = omega.depths[0] - s.values[v, u]
        return FusionResult(s.values + offset, "single_point")

    grads = depth_gradients(s)
    anchors = [(int(u), int(v)) for u, v in omega.pixels]
    out = np.empty_like(s.values)
    fallbacks = 0
    for vp in range(s.height):
        for up in range(s.width):
            raws = [
                raw_weight((up, vp), q, s, grads, params, factors) for q in anchors
            ]
            weights, fell_back = normalize_weights(raws)
            fallbacks += fell_back
            acc = 0.0
            s_p = s.values[vp, up]
            for w, (uq, vq), m in zip(weights, anchors, omega.depths):
                acc += w * (m + (s_p - s.values[vq, uq]))
            out[vp, up] = acc
    return FusionResult(out, "weighted", fallbacks)


def fuse(
    s: DenseDepthMap,
    omega: SparseDepthSet,
    params: FusionParams,
    factors=ALL_FACTORS,
) -> FusionResult:
    """Vectorized fusion, equal to fuse_reference within 1e-12 relative."""
    _validate_fuse_inputs(s, omega, factors)
    if len(omega) == 0:
        return FusionResult(s.values.copy(), "no_fusion")
    if len(omega) == 1:
        u, v = omega.pixels[0]
        offset = omega.depths[0] - s.values[v, u]
        return FusionResult(s.values + offset, "single_point")

    grads = depth_gradients(s)
    uq = omega.pixels[:, 0].astype(np.float64)
    vq = omega.pixels[:, 1].astype(np.float64)
    m_q = omega.depths
    s_q = s.values[omega.pixels[:, 1], omega.pixels[:, 0]]
    gx_q = grads.dx[omega.pixels[:, 1], omega.pixels[:, 0]]
    gy_q = grads.dy[omega.pixels[:, 1], omega.pixels[:, 0]]

    h, w = s.values.shape
    s_flat = s.values.reshape(-1)
    gx_flat = grads.dx.reshape(-1)
    gy_flat = grads.dy.reshape(-1)
    uu = np.tile(np.arange(w, dtype=np.float64), h)
    vv = np.repeat(np.arange(h, dtype=np.float64), w)

    out = np.empty(h * w)
    fallbacks = 0
    for start in range(0, h * w, _CHUNK_PIXELS):
        sl = slice(start, min(start + _CHUNK_PIXELS, h * w))
        du = uq[None, :] - uu[sl, None]
        dv = vq[None, :] - vv[sl, None]
        s_p = s_flat[sl, None]
        weights = np.ones((du.shape[0], len(omega)))
        if 1 in factors:
            weights = np.exp(-np.sqrt(du * du + dv * dv) / params.sigma1)
        if 2 in factors:
            weights = weights / (
                np.abs(gx_q[None, :] - gx_flat[sl, None]) + params.sigma2
            )
            weights = weights / (
                np.abs(gy_q[None, :] - gy_flat[sl, None]) + params.sigma2
            )
        if 3 in factors:
            rx = s_p + gx_flat[sl, None] * du - s_q[None, :]
            weights = weights * (np.exp(-np.abs(rx)) + params.sigma3)
        if 4 in factors:
            ry = s_p + gy_flat[sl, None] * dv - s_q[None, :]
            weights = weights * (np.exp(-np.abs(ry)) + params.sigma3)

        shifted = weights - weights.min(axis=1, keepdims=True)
        denom = shifted.sum(axis=1, keepdims=True)
        degenerate = denom[:, 0] == 0.0
        fallbacks += int(np.count_nonzero(degenerate))
        denom[degenerate, 0] = 1.0
        norm = shifted / denom
        norm[degenerate] = 1.0 / len(omega)
        votes = m_q[None, :] + (s_p - s_q[None, :])
        out[sl] = (norm * votes).sum(axis=1)
    return FusionResult(out.reshape(h, w), "weighted", fallbacks)
