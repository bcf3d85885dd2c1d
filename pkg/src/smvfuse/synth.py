"""Synthetic piecewise-planar scenes with exact ground-truth depth.

A scene is a set of textured rectangular patches (origin plus two edge
vectors, all in world meters) over a fronto-parallel background plane
at a configurable far z-depth.  Rendering ray-casts every pixel with
the closed-form ray/rectangle intersection, so the returned depth is
analytically exact and usable as an oracle for the warp, the
photometric search, and the metrics.

Textures are procedural in patch coordinates (a, b) in [0,1]^2, hence
identical from every viewpoint (a Lambertian world):

    checker:N   N x N parity squares, +-amplitude/2 around 0.5
    noise:N     bilinear value noise on an (N+1)^2 lattice seeded by
                the segment id, +-amplitude/2 around 0.5
    uniform     constant 0.5 (a low-texture region)

fabricate_single_view turns exact depth into a plausible dense prior:
per-segment constant offsets plus smooth seeded sinusoids (wavelengths
>= 32 px), mimicking depth-regression error that is locally correlated
and jumps at segment boundaries.

Scene files are plain text, one declaration per line:

    background <depth_m>
    patch ox oy oz  ux uy uz  vx vy vz  <texture> <amplitude> <segment_id>

with '#' comments.  Segment id -1 is reserved for the background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose
from .maps import DenseDepthMap
from .multiview import Frame

BACKGROUND_SEGMENT = -1
_NOISE_SEED_BASE = 7_700_003
MIN_FABRICATED_DEPTH = 1e-3
_SINUSOID_COUNT = 4
MIN_NOISE_WAVELENGTH_PX = 32.0


@dataclass(frozen=True)
class PatchSpec:
    """One textured rectangle: origin corner + two edge vectors (meters)."""

    origin: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray
    texture: str
    amplitude: float
    segment_id: int

    def __post_init__(self) -> None:
        for name in ("origin", "edge_a", "edge_b"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if vec.shape != (3,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, vec)
        if not (0.0 <= self.amplitude <= 1.0):
            raise ValueError("texture amplitude must lie in [0, 1]")
        if self.segment_id < 0:
            raise ValueError("segment ids are non-negative (-1 is background)")
        kind = self.texture.split(":")[0]
        if kind not in ("checker", "noise", "uniform"):
            raise ValueError(f"unknown texture kind: {self.texture!r}")
        if np.linalg.norm(np.cross(self.edge_a, self.edge_b)) < 1e-12:
            raise ValueError("patch edges are collinear")

    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_a, self.edge_b)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class PlanarScene:
    """Patches over a background plane; one patch per segment id."""

    patches: tuple[PatchSpec, ...]
    background_depth: float = 20.0
    background_intensity: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "patches", tuple(self.patches))
        if not self.patches:
            raise ValueError("scene needs at least one patch")
        ids = [p.segment_id for p in self.patches]
        if len(ids) != len(set(ids)):
            raise ValueError("segment ids must be unique")
        if self.background_depth <= 0:
            raise ValueError("background depth must be positive")
        if not (0.0 <= self.background_intensity <= 1.0):
            raise ValueError("background intensity must lie in [0, 1]")

    def segment_ids(self) -> list[int]:
        return [BACKGROUND_SEGMENT] + [p.segment_id for p in self.patches]


@dataclass(frozen=True)
class TrajectorySpec:
    """Ordered camera-to-world poses with synthetic timestamps."""

    poses: tuple[RigidPose, ...]
    dt: float = 1.0 / 30.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def timestamps(self) -> list[float]:
        return [i * self.dt for i in range(len(self.poses))]


def lateral_trajectory(n_poses: int, step: float) -> TrajectorySpec:
    """n poses translating along +x in equal steps, no rotation."""
    poses = [
        RigidPose(np.eye(3), np.array([i * step, 0.0, 0.0])) for i in range(n_poses)
    ]
    return TrajectorySpec(tuple(poses))


def _texture_value(patch: PatchSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intensity of patch texture at patch coordinates in [0,1]^2.

    Texture grammar: "uniform", "checker:N", "noise:N", or
    "noise:N:SALT".  N is the lattice cell count across the patch; the
    optional SALT decorrelates the noise of patches that share a
    segment id (two co-planar pieces of one wall must not repeat the
    same pattern, or the matcher can lock onto the copy).
    """
    kind, _, arg = patch.texture.partition(":")
    if kind == "uniform":
        return np.full_like(a, 0.5)
    arg, _, salt_arg = arg.partition(":")
    salt = int(salt_arg) if salt_arg else 0
    n = int(arg) if arg else 8
    if n < 1:
        raise ValueError("texture cell count must be >= 1")
    if kind == "checker":
        aa = np.minimum(np.floor(a * n).astype(np.int64), n - 1)
        bb = np.minimum(np.floor(b * n).astype(np.int64), n - 1)
        sign = ((aa + bb) % 2) * 2 - 1
        return 0.5 + 0.5 * patch.amplitude * sign
    # value noise: fixed lattice per (segment id, salt), bilinear in between
    rng = np.random.default_rng(
        (_NOISE_SEED_BASE, patch.segment_id + 2**16, salt)
    )
    lattice = rng.uniform(-1.0, 1.0, size=(n + 1, n + 1))
    x = np.clip(a, 0.0, 1.0) * n
    y = np.clip(b, 0.0, 1.0) * n
    i0 = np.minimum(x.astype(np.int64), n - 1)
    j0 = np.minimum(y.astype(np.int64), n - 1)
    fx = x - i0
    fy = y - j0
    top = lattice[j0, i0] * (1 - fx) + lattice[j0, i0 + 1] * fx
    bot = lattice[j0 + 1, i0] * (1 - fx) + lattice[j0 + 1, i0 + 1] * fx
    return 0.5 + 0.5 * patch.amplitude * (top * (1 - fy) + bot * fy)


def _cast(
    scene: PlanarScene,
    intr: CameraIntrinsics,
    pose: RigidPose,
    uu: np.ndarray,
    vv: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-hit intensity, z-depth, and segment id per ray."""
    dirs_cam = intr.backproject(uu, vv)  # (3, N), camera z = 1
    dirs_world = pose.rotation @ dirs_cam
    center = pose.translation

    depth = np.full(uu.shape, scene.background_depth)
    intensity = np.full(uu.shape, scene.background_intensity)
    segments = np.full(uu.shape, BACKGROUND_SEGMENT, dtype=np.int32)

    for patch in scene.patches:
        n = np.cross(patch.edge_a, patch.edge_b)
        denom = n @ dirs_world
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (n @ (patch.origin - center)) / denom
        # t multiplies a direction with camera z = 1, so t IS the z-depth
        hit = np.isfinite(t) & (t > 0) & (np.abs(denom) > 1e-15)
        rel = (center[:, None] + t * dirs_world) - patch.origin[:, None]
        gram = np.array(
            [
                [patch.edge_a @ patch.edge_a, patch.edge_a @ patch.edge_b],
                [patch.edge_a @ patch.edge_b, patch.edge_b @ patch.edge_b],
            ]
        )
        rhs = np.stack([patch.edge_a @ rel, patch.edge_b @ rel])
        ab = np.linalg.solve(gram, rhs)
        inside = (ab >= 0.0).all(axis=0) & (ab <= 1.0).all(axis=0)
        closer = hit & inside & (t < depth)
        depth = np.where(closer, t, depth)
        segments = np.where(closer, patch.segment_id, segments)
        tex = _texture_value(patch, ab[0], ab[1])
        intensity = np.where(closer, tex, intensity)
    return intensity, depth, segments


def render(
    scene: PlanarScene,
    intr: CameraIntrinsics,
    pose: RigidPose,
    frame_id: str = "synthetic",
    antialias: int = 1,
) -> tuple[Frame, DenseDepthMap, np.ndarray]:
    """Ray-cast one view: intensity frame, exact z-depth, segment-id map.

    Pixels hitting no patch fall back to the background plane (constant
    z-depth in the camera frame, segment id -1).  By default every
    channel is a point sample at the pixel center, so expected values
    stay hand computable.  antialias > 1 instead averages intensity
    over an antialias x antialias subpixel grid, the way a sensor
    integrates over its pixel footprint, which produces mixed pixels
    at depth discontinuities; depth and segment id remain point
    samples either way, keeping the reference depth well defined.
    """
    if antialias < 1:
        raise ValueError("antialias factor must be >= 1")
    h, w = intr.height, intr.width
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    uu, vv = uu.reshape(-1), vv.reshape(-1)

    intensity, depth, segments = _cast(scene, intr, pose, uu, vv)
    if antialias > 1:
        offs = (np.arange(antialias) + 0.5) / antialias - 0.5
        intensity = np.zeros_like(uu)
        for du in offs:
            for dv in offs:
                sub, _, _ = _cast(scene, intr, pose, uu + du, vv + dv)
                intensity += sub
        intensity /= antialias * antialias

    frame = Frame(np.clip(intensity.reshape(h, w), 0.0, 1.0), pose, frame_id)
    return frame, DenseDepthMap(depth.reshape(h, w)), segments.reshape(h, w)


def fabricate_single_view(
    gt: DenseDepthMap,
    segments: np.ndarray,
    offsets: dict[int, float],
    smooth_noise_amp: float,
    seed: int,
) -> DenseDepthMap:
    """Exact depth -> plausible dense prior: per-segment offset + smooth noise.

    The noise is a sum of low-frequency seeded sinusoids so the error
    is spatially correlated inside a segment; offsets shift whole
    segments, putting one error mode per segment.  Each segment gets
    its own phase in every sinusoid: learned priors err coherently
    within a region but independently across regions, and a shared
    global field would let anchors in one segment predict the noise in
    another.  Result is clamped positive.
    """
    seg = np.asarray(segments)
    if seg.shape != gt.values.shape:
        raise ValueError("segment map shape does not match depth")
    present = np.unique(seg)
    missing = [int(s) for s in present if int(s) not in offsets]
    if missing:
        raise ValueError(f"no offset for segment ids {missing}")

    out = gt.values.copy()
    for seg_id, off in offsets.items():
        out = np.where(seg == seg_id, out + off, out)

    if smooth_noise_amp != 0.0:
        h, w = gt.values.shape
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        rng = np.random.default_rng(seed)
        noise = np.zeros((h, w))
        waves = []
        for _ in range(_SINUSOID_COUNT):
            wavelength = rng.uniform(MIN_NOISE_WAVELENGTH_PX, 4.0 * MIN_NOISE_WAVELENGTH_PX)
            angle = rng.uniform(0.0, 2.0 * math.pi)
            waves.append((math.cos(angle) / wavelength, math.sin(angle) / wavelength))
        for seg_id in present:
            # phase keyed on (seed, segment), not on dict or array order
            seg_rng = np.random.default_rng((int(seed), 911, int(seg_id) + 2**16))
            mask = seg == seg_id
            for kx, ky in waves:
                phase = seg_rng.uniform(0.0, 2.0 * math.pi)
                field = np.sin(2.0 * math.pi * (kx * uu + ky * vv) + phase)
                noise[mask] += field[mask]
        out = out + smooth_noise_amp / _SINUSOID_COUNT * noise

    return DenseDepthMap(np.maximum(out, MIN_FABRICATED_DEPTH))


def write_scene(scene: PlanarScene, path: str | Path) -> None:
    """Serialize to the one-declaration-per-line text grammar."""
    lines = [
        "# synthetic planar scene",
        f"background {scene.background_depth!r}",
    ]
    for p in scene.patches:
        coords = " ".join(
            repr(float(x)) for x in (*p.origin, *p.edge_a, *p.edge_b)
        )
        lines.append(f"patch {coords} {p.texture} {p.amplitude!r} {p.segment_id}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path: str | Path) -> PlanarScene:
    """Parse a scene file; raises with the line number on bad input."""
    patches = []
    background = 20.0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "background":
                background = float(parts[1])
            elif parts[0] == "patch":
                if len(parts) != 13:
                    raise ValueError("patch line needs 12 fields after 'patch'")
                nums = [float(x) for x in parts[1:10]]
                patches.append(
                    PatchSpec(
                        origin=np.array(nums[0:3]),
                        edge_a=np.array(nums[3:6]),
                        edge_b=np.array(nums[6:9]),
                        texture=parts[10],
                        amplitude=float(parts[11]),
                        segment_id=int(parts[12]),
                    )
                )
            else:
                raise ValueError(f"unknown declaration {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return PlanarScene(tuple(patches), background_depth=background)


def random_scene(
    seed: int,
    intr: CameraIntrinsics,
    n_patches: int | None = None,
    depth_range: tuple[float, float] = (1.5, 4.0),
) -> PlanarScene:
    """Seeded scene generator: 2-4 planar wall segments tiling the view.

    Vertical bands, one plane per segment, at staggered depths: when
    every wall sits in one depth band, a single depth value explains
    too many anchors and the consensus model can collapse toward a
    constant.  Each band may tilt a little about either image axis
    but stays a single plane.  Neighboring bands overlap slightly in
    x at their different depths, so the closer wall occludes the seam
    and the view stays covered under camera motion.  Every band
    carries fine-celled value noise: aperiodic texture cannot alias
    under a set of lateral baselines that are integer multiples of
    each other, and its gradients are isotropic, so matches along the
    horizontal epipolar direction stay well constrained.

    depth_range brackets the band depths.
    """
    rng = np.random.default_rng(seed)
    count = int(n_patches) if n_patches else int(rng.integers(3, 5))
    if not (2 <= count <= 4):
        raise ValueError("n_patches must be in [2, 4]")

    # x coordinate of the view edge fraction e at depth z, with slack
    # for camera motion; e in [-0.5, 0.5] spans the image plus margin
    def x_at(e: float, z: float) -> float:
        return e * 2.2 * z * (intr.width / 2) / intr.fx

    band_edges = np.linspace(-0.5, 0.5, count + 1)
    depth_rank = rng.permutation(count)

    patches = []
    for idx in range(count):
        e0, e1 = float(band_edges[idx]), float(band_edges[idx + 1])
        z_c = (
            depth_range[0]
            + 0.55 * float(depth_rank[idx])
            + float(rng.uniform(0.0, 0.35))
        )
        # flank extension: hides the seam to the neighbor behind the
        # nearer wall for every camera in the trajectory
        lo = e0 - (0.12 if idx == 0 else 0.06)
        hi = e1 + (0.17 if idx == count - 1 else 0.06)
        # mild in-plane depth drift across the band; the wall stays
        # one plane, just not exactly fronto-parallel
        drift = float(rng.uniform(-0.35, 0.35))
        z_l = float(np.clip(z_c - drift / 2, 1.4, 3.9))
        z_r = float(np.clip(z_c + drift / 2, 1.4, 3.9))
        x_l, x_r = x_at(lo, z_l), x_at(hi, z_r)

        tilt_y = float(rng.uniform(-0.3, 0.3))
        z_deep = max(z_l, z_r) + 0.5
        span_y = 2.9 * z_deep * (intr.height / 2) / intr.fy
        origin = np.array([x_l, -span_y / 2, z_l])

        # texture lattice pitched to about 2 px of projected width per
        # cell: coarser cells fail the gradient mask, much finer ones
        # degrade toward per-pixel noise
        u_l = intr.fx * x_l / z_l
        u_r = intr.fx * x_r / z_r
        jitter = int(rng.integers(-6, 7))
        cells = int(np.clip(round(abs(u_r - u_l) / 1.9) + jitter, 24, 256))
        patches.append(
            PatchSpec(
                origin=origin,
                edge_a=np.array([x_r - x_l, 0.0, z_r - z_l]),
                edge_b=np.array([0.0, span_y, tilt_y]),
                texture=f"noise:{cells}",
                amplitude=float(rng.uniform(0.8, 0.95)),
                segment_id=idx,
            )
        )
    return PlanarScene(tuple(patches), background_depth=12.0)


def random_segment_offsets(
    scene: PlanarScene, seed: int, max_abs: float = 0.3
) -> dict[int, float]:
    """Per-segment single-view offsets, uniform in +-max_abs, seeded."""
    rng = np.random.default_rng(seed)
    offsets = {BACKGROUND_SEGMENT: float(rng.uniform(-max_abs, max_abs))}
    for p in scene.patches:
        offsets[p.segment_id] = float(rng.uniform(-max_abs, max_abs))
    return offsets
