"""Two-stage low-error point selection for the fusion anchor set.

Stage 1 scores every estimated pixel and keeps a top fraction:

    photometric score = (second_best - best) / (best + 1e-6) * cost_slope

higher when the cost curve has one sharp, unambiguous valley (a second
mode close to the best cost, or a flat valley, both drive it to zero);

    geometric score = sensitivity  (pixels of warp motion per m^-1)

higher for strong parallax, since a 1 px correspondence error then
maps to an inverse-depth error of only 1/sensitivity.  Candidates are
ranked by the product of the two scores.

Stage 2 fits a global linear model m = a*s + b between the surviving
multi-view depths m and the dense single-view depths s at the same
pixels, with 2-point RANSAC hypotheses (seeded, deterministic), and
keeps the largest consensus set.  The final anchor set is the winning
hypothesis's inliers; the model itself is least-squares refit on them.
Negative gains are rejected as physically spurious.

Both depths are z-depth in meters; the inverse ray distances coming
out of the hypothesis search are converted here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, ray_to_z_depth
from .maps import DenseDepthMap, SparseDepthSet
from .multiview import SemiDenseDepthResult

SCORE_EPSILON = 1e-6
DEFAULT_FRACTION = 0.25
DEFAULT_RANSAC_ITERS = 200
DEFAULT_INLIER_TOL = 0.10


class ConsensusError(ValueError):
    """No usable linear consensus could be established."""


@dataclass(frozen=True)
class CandidatePoint:
    """One estimated pixel with its cost-curve and parallax metadata."""

    u: int
    v: int
    depth_multiview: float  # z-depth, meters
    best_cost: float
    second_best_cost: float
    cost_slope: float
    sensitivity: float

    def __post_init__(self) -> None:
        if self.depth_multiview <= 0 or not math.isfinite(self.depth_multiview):
            raise ValueError("candidate depth must be positive and finite")
        if self.second_best_cost < self.best_cost:
            raise ValueError("second-best cost cannot beat the best cost")
        if self.cost_slope < 0 or self.sensitivity < 0:
            raise ValueError("slope and sensitivity are non-negative")


@dataclass(frozen=True)
class LinearDepthModel:
    """Global correction m = a*s + b; gain must be positive."""

    a: float
    b: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("model parameters must be finite")
        if self.a <= 0:
            raise ValueError("model gain must be positive")

    def predict(self, s):
        return self.a * np.asarray(s, dtype=np.float64) + self.b


def photometric_score(c: CandidatePoint) -> float:
    """Cost-curve distinctness; zero for ambiguous or flat curves."""
    return (c.second_best_cost - c.best_cost) / (c.best_cost + SCORE_EPSILON) * c.cost_slope


def geometric_score(c: CandidatePoint) -> float:
    """Parallax strength of the pixel's correspondences."""
    return c.sensitivity


def candidates_from_result(
    result: SemiDenseDepthResult, intr: CameraIntrinsics
) -> list[CandidatePoint]:
    """Estimated pixels as candidates, ray depth converted to z-depth.

    Row-major pixel order.
    """
    vv, uu = np.nonzero(result.valid)
    ray_depth = 1.0 / result.inv_depth[vv, uu]
    z = ray_to_z_depth(intr, uu.astype(np.float64), vv.astype(np.float64), ray_depth)
    return [
        CandidatePoint(
            u=int(u),
            v=int(v),
            depth_multiview=float(z_i),
            best_cost=float(result.best_cost[v, u]),
            second_best_cost=float(result.second_best_cost[v, u]),
            cost_slope=float(result.cost_slope[v, u]),
            sensitivity=float(result.sensitivity[v, u]),
        )
        for u, v, z_i in zip(uu, vv, z)
    ]


def select_top_fraction(
    candidates: list[CandidatePoint], fraction: float = DEFAULT_FRACTION
) -> list[CandidatePoint]:
    """Top ceil(fraction*N) candidates by combined score.

    Ties resolve in row-major pixel order so the cut is deterministic.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    if not candidates:
        return []
    keyed = sorted(
        candidates,
        key=lambda c: (-photometric_score(c) * geometric_score(c), c.v, c.u),
    )
    keep = math.ceil(fraction * len(candidates))
    return keyed[:keep]


def _pixel_sorted(points: list[CandidatePoint]) -> list[CandidatePoint]:
    return sorted(points, key=lambda c: (c.v, c.u))


def ransac_linear_consensus(
    points: list[CandidatePoint],
    s: DenseDepthMap,
    iters: int = DEFAULT_RANSAC_ITERS,
    inlier_tol: float = DEFAULT_INLIER_TOL,
    seed: int = 0,
) -> tuple[LinearDepthModel, SparseDepthSet]:
    """Largest-consensus linear fit of multi-view onto single-view depth.

    Points are sorted by pixel before sampling, so the result depends
    only on the point set and the seed, not on input order.  The
    winning hypothesis (most inliers; ties to the earliest iteration)
    defines the returned anchor set; the model is refit on it by least
    squares (falling back to the raw hypothesis if the refit gain goes
    non-positive).

    Raises:
        ConsensusError: fewer than 2 points, or no valid hypothesis.
    """
    if iters < 1:
        raise ValueError("need at least one hypothesis draw")
    if inlier_tol <= 0:
        raise ValueError("inlier tolerance must be positive")
    if len(points) < 2:
        raise ConsensusError("need at least 2 points for a consensus")
    pts = _pixel_sorted(points)
    m = np.array([p.depth_multiview for p in pts])
    sv = np.array([s.values[p.v, p.u] for p in pts], dtype=np.float64)
    if np.any(sv <= 0):
        raise ValueError("single-view depth must be positive at candidate pixels")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_model: tuple[float, float] | None = None
    best_inliers: np.ndarray | None = None
    n = len(pts)
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        ds = sv[i] - sv[j]
        if ds == 0.0:
            continue
        a = (m[i] - m[j]) / ds
        if a <= 0 or not math.isfinite(a):
            continue
        b = m[i] - a * sv[i]
        inliers = np.abs(m - (a * sv + b)) < inlier_tol
        count = int(inliers.sum())
        if count > best_count:  # strict: ties keep the earliest iteration
            best_count = count
            best_model = (a, b)
            best_inliers = inliers
    if best_model is None or best_count < 2:
        raise ConsensusError("no hypothesis reached a 2-point consensus")

    a, b = best_model
    sel = best_inliers
    fit_a, fit_b = np.polyfit(sv[sel], m[sel], deg=1) if best_count > 2 else (a, b)
    if fit_a <= 0 or not (math.isfinite(fit_a) and math.isfinite(fit_b)):
        fit_a, fit_b = a, b
    model = LinearDepthModel(float(fit_a), float(fit_b))

    pixels = np.array([[p.u, p.v] for p, keep in zip(pts, sel) if keep], dtype=np.int64)
    depths = m[sel]
    return model, SparseDepthSet(pixels, depths)


def select_anchors(
    result: SemiDenseDepthResult,
    s: DenseDepthMap,
    intr: CameraIntrinsics,
    fraction: float = DEFAULT_FRACTION,
    iters: int = DEFAULT_RANSAC_ITERS,
    inlier_tol: float = DEFAULT_INLIER_TOL,
    seed: int = 0,
) -> tuple[LinearDepthModel, SparseDepthSet]:
    """Full two-stage selection from a hypothesis-search result."""
    top = select_top_fraction(candidates_from_result(result, intr), fraction)
    return ransac_linear_consensus(top, s, iters, inlier_tol, seed)
