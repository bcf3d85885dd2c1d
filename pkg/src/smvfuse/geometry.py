"""Pinhole camera model, rigid poses, and the inverse-depth warp.

Coordinate conventions used throughout the package:

    - Pixel coordinates are (u, v) = (column, row), origin at the center
      of the top-left pixel.  A pixel is in view when 0 <= u <= width-1
      and 0 <= v <= height-1.
    - Poses stored in datasets are camera-to-world.  The warp consumes a
      *relative* pose: the overlapping camera's pose expressed in the
      keyframe camera's coordinates, built by :func:`relative_pose`.
    - Inverse depth ``rho`` is the reciprocal of the distance along the
      viewing ray (not of the z-coordinate).  The backprojected ray is
      normalized to unit length before the depth hypothesis is applied,
      so ``1/rho`` is a Euclidean distance in meters.  Conversion to
      plain z-depth divides by the norm of the unnormalized ray, see
      :func:`ray_to_z_depth`.

The warp itself: a keyframe pixel ``x`` with unit bearing
``b = K^-1 x / ||K^-1 x||`` at inverse ray distance ``rho`` projects
into the overlapping view as

    x_o = dehom( K . R^T (b - rho t) )

with (R, t) the overlapping camera's pose in keyframe coordinates.
``b - rho t`` is the homogeneous form of ``b/rho - t`` scaled by
``rho > 0``, so the dehomogenized pixel is identical and the sign of
the projected depth is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Step used for the central finite difference in inverse_depth_sensitivity,
# in m^-1.  Well inside any sensible hypothesis range, far above roundoff.
SENSITIVITY_DELTA = 1e-4

_ORTHONORMAL_TOL = 1e-9


class PixelCoord(NamedTuple):
    """Continuous pixel position, (u, v) = (column, row)."""

    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole projection parameters, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        """The 3x3 calibration matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def in_view(self, u: float, v: float) -> bool:
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1

    def backproject(self, u, v):
        """Unnormalized ray K^-1 (u, v, 1), as a (3, ...) array."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)]
        )

    def bearing(self, u, v):
        """Unit-norm viewing ray for pixel (u, v), as a (3, ...) array."""
        ray = self.backproject(u, v)
        return ray / np.linalg.norm(ray, axis=0)


@dataclass(frozen=True)
class RigidPose:
    """Rotation + translation.  ``rotation`` is 3x3 orthonormal with det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidPose":
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self . other, i.e. apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (3,) or (3, N) points."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return self.rotation @ p + self.translation[:, None]


def relative_pose(pose_keyframe: RigidPose, pose_overlap: RigidPose) -> RigidPose:
    """Pose of the overlapping camera expressed in keyframe coordinates.

    Both inputs are camera-to-world.  The result is T_k^-1 . T_o; its
    translation is the overlapping camera's center seen from the
    keyframe, which is exactly what the warp subtracts.  Getting this
    order wrong flips the parallax sign, so every call site goes
    through here.
    """
    return pose_keyframe.inverse().compose(pose_overlap)


def warp_pixels(
    intr: CameraIntrinsics,
    pose_ko: RigidPose,
    u: np.ndarray,
    v: np.ndarray,
    rho: float | np.ndarray,
):
    """Vectorized inverse-depth warp of keyframe pixels into an overlapping view.

    Args:
        intr: Shared camera intrinsics.
        pose_ko: Overlapping camera's pose in keyframe coordinates
            (from :func:`relative_pose`).
        u, v: Keyframe pixel coordinates, broadcastable 1-D arrays.
        rho: Inverse ray distance in m^-1, scalar or array broadcastable
            with u/v.  Must be positive and finite.

    Returns:
        (u_o, v_o, in_front):  warped continuous pixel coordinates and a
        boolean mask that is True where the projected depth is positive.
        Image-bounds checking is left to the caller so that stricter
        interpolation footprints can be applied on top.
    """
    rho_arr = np.asarray(rho, dtype=np.float64)
    if np.any(rho_arr <= 0) or not np.all(np.isfinite(rho_arr)):
        raise ValueError("inverse depth must be positive and finite")
    bearing = intr.bearing(u, v)  # (3, N)
    # Homogeneous point (b; rho) minus translation at scale rho, rotated
    # into the overlapping frame.
    p = bearing - rho_arr * pose_ko.translation[:, None]
    x = pose_ko.rotation.T @ p
    z = x[2]
    in_front = z > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u_o = intr.fx * x[0] / z + intr.cx
        v_o = intr.fy * x[1] / z + intr.cy
    return u_o, v_o, in_front


def warp_pixel(
    intr: CameraIntrinsics, pose_ko: RigidPose, x_k: PixelCoord, rho: float
) -> PixelCoord | None:
    """Warp a single keyframe pixel; None when out of view.

    Out of view means the projected depth is <= 0 or the warped pixel
    falls outside [0, width-1] x [0, height-1].

    Raises:
        ValueError: if rho <= 0 or any input is non-finite.
    """
    if not (math.isfinite(x_k.u) and math.isfinite(x_k.v)):
        raise ValueError("pixel coordinates must be finite")
    u_o, v_o, in_front = warp_pixels(
        intr, pose_ko, np.array([x_k.u]), np.array([x_k.v]), rho
    )
    if not in_front[0]:
        return None
    u, v = float(u_o[0]), float(v_o[0])
    if not intr.in_view(u, v):
        return None
    return PixelCoord(u, v)


def inverse_depth_sensitivity(
    intr: CameraIntrinsics, pose_ko: RigidPose, x_k: PixelCoord, rho: float
) -> float | None:
    """Pixels of warp motion per unit of inverse depth, at ``rho``.

    Central finite difference of the warp position with step
    SENSITIVITY_DELTA.  Returns None when either perturbed warp is out
    of view (the sensitivity is then unavailable for this pixel).
    """
    lo = warp_pixel(intr, pose_ko, x_k, rho - SENSITIVITY_DELTA)
    hi = warp_pixel(intr, pose_ko, x_k, rho + SENSITIVITY_DELTA)
    if lo is None or hi is None:
        return None
    return math.hypot(hi.u - lo.u, hi.v - lo.v) / (2.0 * SENSITIVITY_DELTA)


def ray_norms(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Norm of the unnormalized ray K^-1 (u, v, 1) per pixel.

    Ray distance = z-depth times this factor; see ray_to_z_depth.
    """
    return np.linalg.norm(intr.backproject(u, v), axis=0)


def ray_to_z_depth(intr: CameraIntrinsics, u, v, ray_depth):
    """Convert distance along the viewing ray to plain z-depth."""
    return np.asarray(ray_depth, dtype=np.float64) / ray_norms(intr, u, v)


def z_to_ray_depth(intr: CameraIntrinsics, u, v, z_depth):
    """Convert plain z-depth to distance along the viewing ray."""
    return np.asarray(z_depth, dtype=np.float64) * ray_norms(intr, u, v)
