"""Readers and writers for sequence data.

Four plain-file formats so runs, datasets, and external depth predictors
interoperate without sharing code:

* trajectories: one ``timestamp tx ty tz qx qy qz qw`` line per pose,
  camera-to-world, unit quaternion (x, y, z, w order);
* depth maps: either a grayscale portable float map (``Pf``, meters) or
  a 16-bit PNG holding ``round(meters * 5000)`` with 0 marking invalid;
* intrinsics: a single ``fx fy cx cy width height`` line;
* manifests: one ``timestamp rgb_path [depth_path]`` line per frame.

All poses read here are camera-to-world.  The relative pose that the
photometric warp needs is NOT a raw file pose; build it with
:func:`smvfuse.geometry.relative_pose`, which fixes the composition
order (keyframe inverse first).  Getting that order wrong flips the
parallax sign, so no caller should compose trajectory poses by hand.

Text writers are deterministic: same input, byte-identical file.  Floats
are serialized with ``repr``, which round-trips exactly through the
readers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, RigidPose
from .maps import DenseDepthMap

#: Divisor turning 16-bit PNG depth counts into meters (raw / 5000 = m).
PNG_DEPTH_DIVISOR = 5000.0

#: Quaternions whose norm departs from 1 by more than this are rejected
#: rather than silently normalized.
QUATERNION_NORM_TOL = 1e-3

#: Default association window in seconds.
DEFAULT_MAX_DT = 0.02


# ---------------------------------------------------------------------------
# quaternions


def rotation_from_quaternion(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    """Rotation matrix of a unit quaternion (x, y, z, w order)."""
    x, y, z, w = float(qx), float(qy), float(qz), float(qw)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_from_rotation(rotation: np.ndarray) -> tuple[float, float, float, float]:
    """Unit quaternion (qx, qy, qz, qw) of a rotation matrix, qw >= 0.

    Uses the largest-pivot branch so no branch divides by a small
    number.  The sign convention makes serialization canonical (q and
    -q encode the same rotation).
    """
    r = np.asarray(rotation, dtype=np.float64)
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    if trace > max(r[0, 0], r[1, 1], r[2, 2]):
        s = 2.0 * np.sqrt(1.0 + trace)
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    norm = float(np.sqrt(x * x + y * y + z * z + w * w))
    return (float(x) / norm, float(y) / norm, float(z) / norm, float(w) / norm)


# ---------------------------------------------------------------------------
# trajectories


def read_pose_trajectory(path: str | Path) -> list[tuple[float, RigidPose]]:
    """Parse a trajectory file into (timestamp, camera-to-world pose) pairs.

    Lines starting with ``#`` and blank lines are skipped.  A quaternion
    with ``|norm - 1| < 1e-3`` is normalized; anything further from unit
    is rejected as corrupt rather than repaired.
    """
    path = Path(path)
    trajectory: list[tuple[float, RigidPose]] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ValueError(
                    f"{path}:{lineno}: expected 8 fields "
                    f"'timestamp tx ty tz qx qy qz qw', got {len(fields)}"
                )
            try:
                numbers = [float(f) for f in fields]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric field: {exc}") from exc
            ts = numbers[0]
            t = np.array(numbers[1:4])
            q = np.array(numbers[4:8])
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) >= QUATERNION_NORM_TOL:
                raise ValueError(
                    f"{path}:{lineno}: quaternion norm {norm:.6f} is not "
                    f"within {QUATERNION_NORM_TOL} of 1"
                )
            q = q / norm
            rotation = rotation_from_quaternion(*q)
            trajectory.append((ts, RigidPose(rotation, t)))
    return trajectory


def write_pose_trajectory(
    path: str | Path, trajectory: list[tuple[float, RigidPose]]
) -> None:
    """Serialize (timestamp, camera-to-world pose) pairs, one line each.

    Deterministic: the same trajectory always produces byte-identical
    text.  Quaternions are written with qw >= 0 so a rotation has one
    canonical line.
    """
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in trajectory:
        qx, qy, qz, qw = quaternion_from_rotation(pose.rotation)
        tx, ty, tz = (float(c) for c in pose.translation)
        lines.append(
            f"{float(ts)!r} {tx!r} {ty!r} {tz!r} {qx!r} {qy!r} {qz!r} {qw!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# float maps and depth maps


def write_float_map(values: np.ndarray, path: str | Path) -> None:
    """Write a 2-D float array as a grayscale portable float map.

    Header is ``Pf``, then ``width height``, then the scale ``-1.0``
    (negative = little-endian).  Rows are stored bottom-up, which is
    the format's convention, and values are float32.
    """
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 2:
        raise ValueError(f"float map must be 2-D, got shape {v.shape}")
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(v).astype("<f4").tobytes())


def read_float_map(path: str | Path) -> np.ndarray:
    """Read a grayscale portable float map as a float32 (H, W) array."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    return _parse_pfm(data, path)


def _parse_pfm(data: bytes, path: Path) -> np.ndarray:
    # Header: three whitespace-separated tokens (magic, "w h", scale),
    # each terminated by a single whitespace byte, then raw samples.
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        end = pos
        while end < len(data) and data[end : end + 1] not in (b" ", b"\n", b"\r", b"\t"):
            end += 1
        tokens.append(data[pos:end])
        pos = end + 1
    if not tokens or tokens[0] != b"Pf":
        magic = tokens[0][:8] if tokens else b""
        raise ValueError(f"{path}: unknown magic {magic!r}, expected 'Pf'")
    if len(tokens) < 4:
        raise ValueError(f"{path}: truncated float map header")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed float map header: {exc}") from exc
    if w < 1 or h < 1 or scale == 0:
        raise ValueError(f"{path}: bad float map dimensions or scale")
    endian = "<" if scale < 0 else ">"
    expected = w * h * 4
    body = data[pos : pos + expected]
    if len(body) != expected:
        raise ValueError(
            f"{path}: float map body holds {len(body)} bytes, expected {expected}"
        )
    flat = np.frombuffer(body, dtype=f"{endian}f4").reshape(h, w)
    return np.flipud(flat).astype(np.float32)


def write_depth_map(depth: DenseDepthMap, path: str | Path) -> None:
    """Write a depth map; the suffix picks the format.

    ``.pfm`` stores meters as float32.  ``.png`` stores a 16-bit
    grayscale image of ``round(meters * 5000)``; depths past the
    16-bit ceiling (about 13.1 m) saturate, and invalid pixels
    (value 0) stay 0.
    """
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_float_map(depth.values, path)
    elif path.suffix.lower() == ".png":
        raw = np.round(depth.values * PNG_DEPTH_DIVISOR)
        raw = np.clip(raw, 0, 65535).astype(np.uint16)
        Image.fromarray(raw).save(path)
    else:
        raise ValueError(f"{path}: unsupported depth suffix, use .pfm or .png")


def read_depth_map(
    path: str | Path, expect_shape: tuple[int, int] | None = None
) -> DenseDepthMap:
    """Read a depth map in meters; the file's magic picks the format.

    ``expect_shape`` is (height, width); a mismatch is an error so a
    stale file cannot silently pair with the wrong sequence.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
        rest = fh.read()
    data = head + rest
    if head[:2] == b"Pf":
        values = _parse_pfm(data, path).astype(np.float64)
    elif head[:8] == b"\x89PNG\r\n\x1a\n":
        img = Image.open(path)
        raw = np.asarray(img)
        if raw.ndim != 2 or raw.dtype not in (np.dtype(np.uint16), np.dtype(np.int32)):
            raise ValueError(
                f"{path}: depth PNG must be single-channel 16-bit, "
                f"got mode {img.mode}"
            )
        values = raw.astype(np.float64) / PNG_DEPTH_DIVISOR
    else:
        raise ValueError(f"{path}: unknown magic {head[:2]!r}, expected 'Pf' or PNG")
    if expect_shape is not None and values.shape != tuple(expect_shape):
        raise ValueError(
            f"{path}: depth map shape {values.shape} does not match "
            f"expected {tuple(expect_shape)}"
        )
    return DenseDepthMap(values)


# ---------------------------------------------------------------------------
# grayscale images


def write_image(values: np.ndarray, path: str | Path) -> None:
    """Write intensities in [0, 1] as an 8-bit grayscale PNG."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise ValueError("image intensities must be finite and in [0, 1]")
    raw = np.round(v * 255.0).astype(np.uint8)
    Image.fromarray(raw, mode="L").save(path)


def read_image(path: str | Path) -> np.ndarray:
    """Read an image as grayscale float64 intensities in [0, 1]."""
    img = Image.open(path)
    if img.mode in ("I;16", "I"):
        return np.asarray(img, dtype=np.float64) / 65535.0
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# intrinsics


def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    """Parse a one-line ``fx fy cx cy width height`` intrinsics file."""
    path = Path(path)
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ValueError(
                f"{path}:{lineno}: expected 6 fields 'fx fy cx cy width height', "
                f"got {len(fields)}"
            )
        try:
            fx, fy, cx, cy = (float(f) for f in fields[:4])
            width, height = int(fields[4]), int(fields[5])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad intrinsics field: {exc}") from exc
        return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    raise ValueError(f"{path}: no intrinsics line found")


def write_intrinsics(intr: CameraIntrinsics, path: str | Path) -> None:
    Path(path).write_text(
        f"# fx fy cx cy width height\n"
        f"{float(intr.fx)!r} {float(intr.fy)!r} {float(intr.cx)!r} "
        f"{float(intr.cy)!r} {intr.width} {intr.height}\n",
        encoding="ascii",
    )


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class SequenceEntry:
    """One frame of a sequence: when it was taken and where its files live."""

    timestamp: float
    rgb: Path
    depth: Path | None = None


@dataclass(frozen=True)
class SequenceManifest:
    """Ordered frames of one sequence; timestamps strictly increase."""

    entries: tuple[SequenceEntry, ...]

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        for prev, cur in zip(entries, entries[1:]):
            if cur.timestamp <= prev.timestamp:
                raise ValueError(
                    f"manifest timestamps must strictly increase, "
                    f"{cur.timestamp!r} follows {prev.timestamp!r}"
                )
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timestamps(self) -> list[float]:
        return [e.timestamp for e in self.entries]


def read_manifest(path: str | Path) -> SequenceManifest:
    """Parse a manifest; relative paths resolve against the file's directory.

    Every referenced file must exist at load so a broken sequence fails
    here, not halfway through a run.
    """
    path = Path(path)
    base = path.parent
    entries: list[SequenceEntry] = []
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (2, 3):
            raise ValueError(
                f"{path}:{lineno}: expected 'timestamp rgb_path [depth_path]', "
                f"got {len(fields)} fields"
            )
        try:
            ts = float(fields[0])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad timestamp: {exc}") from exc
        rgb = (base / fields[1]).resolve()
        if not rgb.is_file():
            raise ValueError(f"{path}:{lineno}: rgb file not found: {rgb}")
        depth = None
        if len(fields) == 3:
            depth = (base / fields[2]).resolve()
            if not depth.is_file():
                raise ValueError(f"{path}:{lineno}: depth file not found: {depth}")
        entries.append(SequenceEntry(timestamp=ts, rgb=rgb, depth=depth))
    return SequenceManifest(tuple(entries))


def write_manifest(manifest: SequenceManifest, path: str | Path) -> None:
    """Write a manifest with paths relative to its own directory when possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return p.resolve().relative_to(base).as_posix()
        except ValueError:
            return p.resolve().as_posix()

    lines = ["# timestamp rgb_path [depth_path]"]
    for e in manifest.entries:
        tail = f" {rel(e.depth)}" if e.depth is not None else ""
        lines.append(f"{float(e.timestamp)!r} {rel(e.rgb)}{tail}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# association


def associate(
    timestamps_a: list[float],
    timestamps_b: list[float],
    max_dt: float = DEFAULT_MAX_DT,
) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching between two streams.

    Candidate pairs within ``max_dt`` seconds are taken best-first
    (smallest gap, index order breaking exact ties), each entry matched
    at most once.  Returns (index_a, index_b) pairs sorted by index_a.
    """
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    candidates = [
        (abs(ta - tb), i, j)
        for i, ta in enumerate(timestamps_a)
        for j, tb in enumerate(timestamps_b)
        if abs(ta - tb) <= max_dt
    ]
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches: list[tuple[int, int]] = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    matches.sort()
    return matches
