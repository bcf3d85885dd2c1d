"""Semi-dense inverse-depth estimation by photometric hypothesis search.

For every requested keyframe pixel the engine sweeps a fixed grid of
inverse ray distances rho, warps the pixel into each overlapping frame
(geometry module), samples intensities bilinearly, and scores each
hypothesis with the mean absolute intensity difference over the frames
whose warp lands in view.  The discrete argmin is refined with one
parabolic fit through its two neighbors, clamped to that interval.

Per-pixel cost-curve metadata needed by downstream point selection is
computed in the same sweep:

    best_cost          cost at the discrete argmin
    second_best_cost   lowest cost at least NMS_GRID_STEPS away from
                       the argmin (a second mode, not the same valley)
    cost_slope         mean |neighbor cost - best cost| per grid step
    sensitivity        pixels of warp motion per unit rho at the
                       solution, averaged over usable frames
    n_views            frames contributing at the argmin

Exclusion rules: a pixel is dropped when no hypothesis reaches
min_views contributing frames, or when its cost curve is flat
(max - min < FLAT_CURVE_MIN_RANGE, i.e. below one intensity quantum);
flat curves carry no depth information (textureless or zero parallax).

Everything is elementwise per pixel, so estimating any pixel subset
yields bit-identical values to estimating all pixels and restricting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    SENSITIVITY_DELTA,
    CameraIntrinsics,
    PixelCoord,
    RigidPose,
    relative_pose,
    warp_pixels,
)

# one 8-bit intensity quantum on the [0,1] scale
FLAT_CURVE_MIN_RANGE = 1.0 / 255.0
NMS_GRID_STEPS = 3


@dataclass(frozen=True)
class Frame:
    """Grayscale image in [0, 1] plus its camera-to-world pose."""

    image: np.ndarray
    pose: RigidPose
    frame_id: str

    def __post_init__(self) -> None:
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ValueError("frame image must be 2-D grayscale")
        if not np.all(np.isfinite(img)):
            raise ValueError("frame image contains non-finite values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class InverseDepthHypothesisGrid:
    """Uniform hypothesis grid in inverse ray distance (m^-1)."""

    rho_min: float = 0.1
    rho_max: float = 2.0
    n_samples: int = 64

    def __post_init__(self) -> None:
        if not (0.0 < self.rho_min < self.rho_max):
            raise ValueError("need 0 < rho_min < rho_max")
        if self.n_samples < 8:
            raise ValueError("hypothesis grid needs at least 8 samples")

    @property
    def step(self) -> float:
        return (self.rho_max - self.rho_min) / (self.n_samples - 1)

    def samples(self) -> np.ndarray:
        return np.linspace(self.rho_min, self.rho_max, self.n_samples)


@dataclass(frozen=True)
class SemiDenseDepthResult:
    """Per-pixel inverse depth and cost-curve metadata; NaN marks absent.

    inv_depth is inverse ray distance.  n_views is 0 at absent pixels.
    """

    inv_depth: np.ndarray
    best_cost: np.ndarray
    second_best_cost: np.ndarray
    cost_slope: np.ndarray
    sensitivity: np.ndarray
    n_views: np.ndarray
    grid: InverseDepthHypothesisGrid

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.inv_depth)

    def to_stack(self) -> np.ndarray:
        """(6, H, W) float64 stack for deterministic .npy persistence."""
        return np.stack(
            [
                self.inv_depth,
                self.best_cost,
                self.second_best_cost,
                self.cost_slope,
                self.sensitivity,
                self.n_views.astype(np.float64),
            ]
        )

    @classmethod
    def from_stack(
        cls, stack: np.ndarray, grid: InverseDepthHypothesisGrid
    ) -> "SemiDenseDepthResult":
        if stack.ndim != 3 or stack.shape[0] != 6:
            raise ValueError("expected a (6, H, W) metadata stack")
        return cls(
            inv_depth=stack[0],
            best_cost=stack[1],
            second_best_cost=stack[2],
            cost_slope=stack[3],
            sensitivity=stack[4],
            n_views=stack[5].astype(np.int32),
            grid=grid,
        )


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample image at continuous (u, v); incomplete 2x2 footprint = invalid.

    Returns (values, valid).  A coordinate needs floor and floor+1 inside
    the image on both axes, so the last row/column is never sampled.
    """
    h, w = image.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        valid = (i0 >= 0) & (i0 + 1 <= w - 1) & (j0 >= 0) & (j0 + 1 <= h - 1)
    i0c = np.clip(i0, 0, w - 2)
    j0c = np.clip(j0, 0, h - 2)
    fu = u - i0c
    fv = v - j0c
    top = image[j0c, i0c] * (1.0 - fu) + image[j0c, i0c + 1] * fu
    bot = image[j0c + 1, i0c] * (1.0 - fu) + image[j0c + 1, i0c + 1] * fu
    vals = top * (1.0 - fv) + bot * fv
    return np.where(valid, vals, 0.0), valid


def photometric_error(
    ref: Frame,
    other: Frame,
    intr: CameraIntrinsics,
    x_k: PixelCoord,
    rho: float,
) -> float | None:
    """I_ref(x_k) - I_other(warp(x_k, rho)); None when the warp leaves view."""
    if not intr.in_view(x_k.u, x_k.v):
        raise ValueError("reference pixel outside the image")
    pose_ko = relative_pose(ref.pose, other.pose)
    u_o, v_o, in_front = warp_pixels(
        intr, pose_ko, np.array([x_k.u]), np.array([x_k.v]), rho
    )
    if not in_front[0]:
        return None
    vals, ok = bilinear_sample(other.image, u_o, v_o)
    if not ok[0]:
        return None
    ref_val, ref_ok = bilinear_sample(ref.image, np.array([x_k.u]), np.array([x_k.v]))
    if not ref_ok[0]:
        return None
    return float(ref_val[0] - vals[0])


def total_cost(
    ref: Frame,
    others: list[Frame],
    intr: CameraIntrinsics,
    x_k: PixelCoord,
    rho: float,
    metric: str = "l1",
) -> tuple[float | None, int]:
    """Mean per-frame photometric cost at one hypothesis.

    Returns (cost, n_contributing); cost is None when no frame has the
    warp in view.  metric selects |e| or e^2 per frame before the mean.
    """
    if not others:
        raise ValueError("need at least one overlapping frame")
    if metric not in ("l1", "l2"):
        raise ValueError("metric must be 'l1' or 'l2'")
    acc = 0.0
    n = 0
    for other in others:
        err = photometric_error(ref, other, intr, x_k, rho)
        if err is None:
            continue
        acc += abs(err) if metric == "l1" else err * err
        n += 1
    if n == 0:
        return None, 0
    return acc / n, n


def estimate_inverse_depth(
    ref: Frame,
    others: list[Frame],
    intr: CameraIntrinsics,
    grid: InverseDepthHypothesisGrid,
    mask: np.ndarray,
    min_views: int = 1,
    metric: str = "l1",
) -> SemiDenseDepthResult:
    """Exhaustive per-pixel hypothesis search over the masked pixels.

    mask is a boolean (H, W) array selecting the pixels to estimate
    (all True for a dense map, an image-gradient mask for a semi-dense
    one).  Absent pixels carry NaN metadata and n_views 0.
    """
    if not others:
        raise ValueError("need at least one overlapping frame")
    if metric not in ("l1", "l2"):
        raise ValueError("metric must be 'l1' or 'l2'")
    h, w = ref.image.shape
    if (h, w) != (intr.height, intr.width):
        raise ValueError("frame size does not match intrinsics")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError("mask shape does not match the image")

    vv, uu = np.nonzero(mask)
    n_pix = uu.size
    out = {
        name: np.full((h, w), np.nan)
        for name in ("inv_depth", "best_cost", "second_best_cost", "cost_slope", "sensitivity")
    }
    n_views_map = np.zeros((h, w), dtype=np.int32)
    if n_pix == 0:
        return SemiDenseDepthResult(
            out["inv_depth"], out["best_cost"], out["second_best_cost"],
            out["cost_slope"], out["sensitivity"], n_views_map, grid,
        )

    u_f = uu.astype(np.float64)
    v_f = vv.astype(np.float64)
    ref_vals, ref_ok = bilinear_sample(ref.image, u_f, v_f)
    rel_poses = [relative_pose(ref.pose, o.pose) for o in others]
    rhos = grid.samples()

    cost_sum = np.zeros((n_pix, grid.n_samples))
    count = np.zeros((n_pix, grid.n_samples), dtype=np.int32)
    for pose_ko, other in zip(rel_poses, others):
        for k, rho in enumerate(rhos):
            u_o, v_o, in_front = warp_pixels(intr, pose_ko, u_f, v_f, float(rho))
            vals, ok = bilinear_sample(other.image, u_o, v_o)
            ok &= in_front & ref_ok
            err = ref_vals - vals
            term = np.abs(err) if metric == "l1" else err * err
            cost_sum[:, k] += np.where(ok, term, 0.0)
            count[:, k] += ok.astype(np.int32)

    with np.errstate(invalid="ignore"):
        cost = np.where(count > 0, cost_sum / np.maximum(count, 1), np.inf)
    usable = count >= min_views
    cost_usable = np.where(usable, cost, np.inf)

    any_usable = usable.any(axis=1)
    finite = np.isfinite(cost_usable)
    c_max = np.where(finite, cost_usable, -np.inf).max(axis=1)
    c_min = np.where(finite, cost_usable, np.inf).min(axis=1)
    flat = (c_max - c_min) < FLAT_CURVE_MIN_RANGE
    keep = any_usable & ~flat
    if not keep.any():
        return SemiDenseDepthResult(
            out["inv_depth"], out["best_cost"], out["second_best_cost"],
            out["cost_slope"], out["sensitivity"], n_views_map, grid,
        )

    best_idx = np.argmin(cost_usable, axis=1)
    rows = np.arange(n_pix)
    best_cost = cost_usable[rows, best_idx]

    # parabolic refinement, only where both neighbors exist and the
    # three-point stencil is strictly convex; clamped to one grid step
    refined = rhos[best_idx].copy()
    interior = (best_idx > 0) & (best_idx < grid.n_samples - 1)
    il = np.maximum(best_idx - 1, 0)
    ir = np.minimum(best_idx + 1, grid.n_samples - 1)
    c_l = cost_usable[rows, il]
    c_r = cost_usable[rows, ir]
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = c_l - 2.0 * best_cost + c_r
        can_refine = interior & np.isfinite(c_l) & np.isfinite(c_r) & (denom > 0)
        offset = np.where(can_refine, 0.5 * (c_l - c_r) / np.where(denom > 0, denom, 1.0), 0.0)
    offset = np.clip(offset, -1.0, 1.0)
    refined = np.where(can_refine, refined + offset * grid.step, refined)
    refined = np.clip(refined, grid.rho_min, grid.rho_max)

    # second-best outside the non-max-suppression window
    idx_grid = np.arange(grid.n_samples)
    far = np.abs(idx_grid[None, :] - best_idx[:, None]) >= NMS_GRID_STEPS
    cost_far = np.where(far, cost_usable, np.inf)
    second = cost_far.min(axis=1)
    second = np.where(np.isfinite(second), second, best_cost)

    # mean absolute cost step towards the available argmin neighbors
    slope_terms = np.zeros(n_pix)
    slope_n = np.zeros(n_pix)
    for nb, exists in ((il, best_idx > 0), (ir, best_idx < grid.n_samples - 1)):
        c_n = cost_usable[rows, nb]
        ok = exists & np.isfinite(c_n)
        with np.errstate(invalid="ignore"):
            gap = np.where(ok, np.abs(c_n - best_cost), 0.0)
        slope_terms += gap
        slope_n += ok
    slope = np.where(slope_n > 0, slope_terms / np.maximum(slope_n, 1), 0.0)

    # warp-motion sensitivity at the refined solution, averaged over frames
    sens_sum = np.zeros(n_pix)
    sens_n = np.zeros(n_pix)
    rho_lo = np.maximum(refined - SENSITIVITY_DELTA, 1e-12)
    rho_hi = refined + SENSITIVITY_DELTA
    for pose_ko in rel_poses:
        u_lo, v_lo, f_lo = warp_pixels(intr, pose_ko, u_f, v_f, rho_lo)
        u_hi, v_hi, f_hi = warp_pixels(intr, pose_ko, u_f, v_f, rho_hi)
        ok = (
            f_lo & f_hi
            & _in_view_mask(intr, u_lo, v_lo)
            & _in_view_mask(intr, u_hi, v_hi)
        )
        motion = np.hypot(u_hi - u_lo, v_hi - v_lo) / (rho_hi - rho_lo)
        sens_sum += np.where(ok, motion, 0.0)
        sens_n += ok
    sens = np.where(sens_n > 0, sens_sum / np.maximum(sens_n, 1), 0.0)

    sel = keep
    out["inv_depth"][vv[sel], uu[sel]] = refined[sel]
    out["best_cost"][vv[sel], uu[sel]] = best_cost[sel]
    out["second_best_cost"][vv[sel], uu[sel]] = second[sel]
    out["cost_slope"][vv[sel], uu[sel]] = slope[sel]
    out["sensitivity"][vv[sel], uu[sel]] = sens[sel]
    n_views_map[vv[sel], uu[sel]] = count[rows[sel], best_idx[sel]]
    return SemiDenseDepthResult(
        out["inv_depth"], out["best_cost"], out["second_best_cost"],
        out["cost_slope"], out["sensitivity"], n_views_map, grid,
    )


def _in_view_mask(intr: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (u >= 0.0) & (u <= intr.width - 1.0) & (v >= 0.0) & (v <= intr.height - 1.0)
