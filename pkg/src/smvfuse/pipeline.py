"""Batch orchestration: keyframe scheduling, stage wiring, artifacts.

Every stage reads its inputs from disk and writes its outputs to disk,
so the CLI subcommands compose: a search stage from one run can feed a
selection stage from another, and an external single-view predictor
only has to drop compatible depth files into a directory.

Per-keyframe artifacts, named after the RGB file's stem:

* ``<stem>_search.npy``     (6, H, W) hypothesis-search metadata
* ``<stem>_multiview.pfm``  multi-view z-depth, 0 where not estimated
* ``<stem>_omega.csv``      selected anchors, columns u,v,m
* ``<stem>_model.txt``      the consensus depth-correction line
* ``<stem>_fused.pfm``      fused dense depth
* ``<stem>_err_fused.pfm``  fused minus ground truth (when truth exists)
* ``<stem>_err_single.pfm`` single-view minus ground truth

plus ``metrics.csv``, ``config_echo.txt``, and for ablations
``metrics_ablation.csv`` with one row per keyframe and weight variant.

Keyframes are processed independently (optionally in parallel, capped
by the SMVFUSE_THREADS environment variable); logs and CSV rows are
assembled in keyframe order afterwards, so outputs are byte-identical
for any thread count.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset_io import (
    SequenceEntry,
    SequenceManifest,
    associate,
    read_depth_map,
    read_image,
    read_intrinsics,
    read_manifest,
    read_pose_trajectory,
    write_depth_map,
    write_float_map,
    write_image,
    write_intrinsics,
    write_manifest,
    write_pose_trajectory,
)
from .fusion import ALL_FACTORS, fuse
from .geometry import CameraIntrinsics, RigidPose, ray_to_z_depth
from .maps import DenseDepthMap, SparseDepthSet, resize_bilinear
from .metrics import error_report, gradient_magnitude, report_csv
from .multiview import Frame, SemiDenseDepthResult, estimate_inverse_depth
from .selection import ConsensusError, LinearDepthModel, select_anchors
from .synth import (
    fabricate_single_view,
    lateral_trajectory,
    random_scene,
    random_segment_offsets,
    render,
    write_scene,
)

#: Fused values are clamped to at least this depth before writing;
#: disagreeing anchors can blend below zero and a depth file cannot
#: hold that.
FUSED_DEPTH_FLOOR = 1e-3

#: Environment variable capping worker threads (default 1).
THREADS_ENV = "SMVFUSE_THREADS"

ABLATION_VARIANTS = (("w1", (1,)), ("w1w2", (1, 2)), ("all", ALL_FACTORS))


class PipelineError(RuntimeError):
    """A stage could not run; ``stage`` names which one."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(message)
        self.stage = stage


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise PipelineError("setup", f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise PipelineError("setup", f"{THREADS_ENV} must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# sequence loading and scheduling


@dataclass(frozen=True)
class SequenceContext:
    """Everything the stages share: frames, truth, calibration, naming."""

    manifest: SequenceManifest
    intr: CameraIntrinsics
    frames: tuple[Frame, ...]
    gt: tuple[DenseDepthMap | None, ...]

    def stem(self, index: int) -> str:
        return Path(self.manifest.entries[index].rgb).stem


def load_sequence(config: RunConfig) -> SequenceContext:
    """Load manifest, intrinsics, images, poses, and optional truth.

    Every frame must find a pose within the association window; a
    sequence with pose gaps fails here rather than mid-run.
    """
    config.require_paths("manifest", "intrinsics", "poses")
    manifest = read_manifest(config.manifest)
    if len(manifest) == 0:
        raise PipelineError("setup", f"manifest is empty: {config.manifest}")
    intr = read_intrinsics(config.intrinsics)
    trajectory = read_pose_trajectory(config.poses)
    matches = dict(associate(manifest.timestamps, [ts for ts, _ in trajectory]))
    frames: list[Frame] = []
    gt: list[DenseDepthMap | None] = []
    for i, entry in enumerate(manifest.entries):
        if i not in matches:
            raise PipelineError(
                "poses",
                f"no pose within the association window of frame "
                f"t={entry.timestamp!r} ({entry.rgb.name})",
            )
        image = read_image(entry.rgb)
        if image.shape != (intr.height, intr.width):
            raise PipelineError(
                "setup",
                f"{entry.rgb.name}: image shape {image.shape} does not match "
                f"intrinsics {intr.height}x{intr.width}",
            )
        pose = trajectory[matches[i]][1]
        frames.append(Frame(image=image, pose=pose, frame_id=Path(entry.rgb).stem))
        gt.append(
            read_depth_map(entry.depth, expect_shape=image.shape)
            if entry.depth is not None
            else None
        )
    return SequenceContext(manifest, intr, tuple(frames), tuple(gt))


def keyframe_indices(n_frames: int, every: int) -> list[int]:
    if every < 1:
        raise PipelineError("setup", f"keyframe_every must be >= 1, got {every}")
    return list(range(0, n_frames, every))


def overlap_indices(keyframe: int, n_frames: int, count: int) -> list[int]:
    """The ``count`` frames nearest by index, the keyframe excluded.

    Ties (equal distance both sides) resolve toward the earlier frame
    so the set is deterministic.
    """
    others = [i for i in range(n_frames) if i != keyframe]
    others.sort(key=lambda i: (abs(i - keyframe), i))
    return sorted(others[:count])


# ---------------------------------------------------------------------------
# per-keyframe stages (disk to disk)


def _search_path(config: RunConfig, stem: str) -> Path:
    return Path(config.output_dir) / f"{stem}_search.npy"


def _artifact(config: RunConfig, stem: str, suffix: str) -> Path:
    return Path(config.output_dir) / f"{stem}{suffix}"


def single_view_path(config: RunConfig, stem: str) -> Path:
    """The single-view depth file for a frame stem (.pfm, else .png)."""
    if config.single_view_dir is None:
        raise FileNotFoundError("config key 'single_view_dir' is not set")
    base = Path(config.single_view_dir)
    for suffix in (".pfm", ".png"):
        candidate = base / f"{stem}{suffix}"
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(
        f"single-view depth not found for {stem!r}: {base / (stem + '.pfm')}"
    )


def load_single_view(config: RunConfig, ctx: SequenceContext, stem: str) -> DenseDepthMap:
    """Read and, if network-native resolution differs, upsample to frame size."""
    raw = read_depth_map(single_view_path(config, stem))
    if raw.values.shape != (ctx.intr.height, ctx.intr.width):
        raw = DenseDepthMap(resize_bilinear(raw.values, ctx.intr.width, ctx.intr.height))
    raw.require_positive("single-view depth")
    return raw


def stage_multiview(config: RunConfig, ctx: SequenceContext, keyframe: int) -> None:
    """Hypothesis search for one keyframe; writes search stack + z-depth map."""
    ref = ctx.frames[keyframe]
    overlaps = overlap_indices(keyframe, len(ctx.frames), config.n_overlap)
    if not overlaps:
        raise PipelineError("multiview", f"keyframe {keyframe} has no overlapping frames")
    mask = gradient_magnitude(ref.image) > config.gradient_threshold
    try:
        result = estimate_inverse_depth(
            ref,
            [ctx.frames[i] for i in overlaps],
            ctx.intr,
            config.hypothesis_grid(),
            mask,
            min_views=config.min_views,
            metric=config.metric,
        )
    except ValueError as exc:
        raise PipelineError("multiview", str(exc)) from exc
    stem = ctx.stem(keyframe)
    np.save(_search_path(config, stem), result.to_stack())
    write_depth_map(
        DenseDepthMap(_z_depth_map(result, ctx.intr)),
        _artifact(config, stem, "_multiview.pfm"),
    )


def _z_depth_map(result: SemiDenseDepthResult, intr: CameraIntrinsics) -> np.ndarray:
    """Valid inverse ray distances as a z-depth array, 0 where absent."""
    z = np.zeros_like(result.inv_depth)
    vv, uu = np.nonzero(result.valid)
    if uu.size:
        ray = 1.0 / result.inv_depth[vv, uu]
        z[vv, uu] = ray_to_z_depth(intr, uu.astype(np.float64), vv.astype(np.float64), ray)
    return z


def load_search(config: RunConfig, stem: str) -> SemiDenseDepthResult:
    path = _search_path(config, stem)
    if not path.is_file():
        raise FileNotFoundError(f"search stack not found (run multiview first): {path}")
    return SemiDenseDepthResult.from_stack(np.load(path), config.hypothesis_grid())


def write_omega_csv(omega: SparseDepthSet, path: Path) -> None:
    lines = ["u,v,m"]
    for (u, v), m in zip(omega.pixels, omega.depths):
        lines.append(f"{int(u)},{int(v)},{float(m)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_omega_csv(path: str | Path) -> SparseDepthSet:
    path = Path(path)
    with open(path, "r", encoding="ascii", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["u", "v", "m"]:
        raise ValueError(f"{path}: expected header 'u,v,m'")
    pixels = [(int(r[0]), int(r[1])) for r in rows[1:]]
    depths = [float(r[2]) for r in rows[1:]]
    return SparseDepthSet(
        np.array(pixels, dtype=np.int64).reshape(-1, 2),
        np.array(depths, dtype=np.float64),
    )


def stage_select(config: RunConfig, ctx: SequenceContext, keyframe: int) -> None:
    """Two-stage anchor selection; writes the anchor CSV and the line model."""
    stem = ctx.stem(keyframe)
    result = load_search(config, stem)
    s = load_single_view(config, ctx, stem)
    try:
        model, omega = select_anchors(
            result,
            s,
            ctx.intr,
            fraction=config.fraction,
            iters=config.ransac_iters,
            inlier_tol=config.inlier_tol,
            seed=config.seed,
        )
    except ConsensusError as exc:
        raise PipelineError("select", f"{stem}: {exc}") from exc
    write_omega_csv(omega, _artifact(config, stem, "_omega.csv"))
    _artifact(config, stem, "_model.txt").write_text(
        f"a={model.a!r}\nb={model.b!r}\nn={len(omega)}\n", encoding="ascii"
    )


def stage_fuse(
    config: RunConfig, ctx: SequenceContext, keyframe: int, factors=ALL_FACTORS
) -> DenseDepthMap:
    """Weighted fusion; writes the fused map and, given truth, error maps."""
    stem = ctx.stem(keyframe)
    omega_path = _artifact(config, stem, "_omega.csv")
    if not omega_path.is_file():
        raise FileNotFoundError(f"anchor set not found (run select first): {omega_path}")
    omega = read_omega_csv(omega_path)
    s = load_single_view(config, ctx, stem)
    try:
        fused_values = fuse(s, omega, config.fusion_params(), factors).values
    except ValueError as exc:
        raise PipelineError("fuse", f"{stem}: {exc}") from exc
    fused = DenseDepthMap(np.maximum(fused_values, FUSED_DEPTH_FLOOR))
    write_depth_map(fused, _artifact(config, stem, "_fused.pfm"))
    gt = ctx.gt[keyframe]
    if gt is not None:
        write_float_map(fused.values - gt.values, _artifact(config, stem, "_err_fused.pfm"))
        write_float_map(s.values - gt.values, _artifact(config, stem, "_err_single.pfm"))
    return fused


def evaluate_keyframe(config: RunConfig, ctx: SequenceContext, keyframe: int):
    """Metric rows (method, report) for one keyframe against its truth."""
    stem = ctx.stem(keyframe)
    gt = ctx.gt[keyframe]
    if gt is None:
        raise PipelineError("evaluate", f"{stem}: no ground-truth depth in the manifest")
    image = ctx.frames[keyframe].image
    rows = []
    s = load_single_view(config, ctx, stem)
    rows.append((stem, "single", error_report(s, gt, gt.valid, image)))
    mv_path = _artifact(config, stem, "_multiview.pfm")
    if mv_path.is_file():
        mv = read_depth_map(mv_path)
        rows.append((stem, "multiview", error_report(mv, gt, mv.valid & gt.valid, image)))
    fused_path = _artifact(config, stem, "_fused.pfm")
    if fused_path.is_file():
        fused = read_depth_map(fused_path)
        rows.append((stem, "fused", error_report(fused, gt, gt.valid, image)))
    return rows


# ---------------------------------------------------------------------------
# whole-run drivers


def _run_over_keyframes(config: RunConfig, ctx: SequenceContext, work):
    """Run ``work(keyframe)`` over all keyframes, optionally in parallel.

    Results come back in keyframe order regardless of scheduling, so
    everything derived from them is thread-count invariant.
    """
    keyframes = keyframe_indices(len(ctx.frames), config.keyframe_every)
    threads = thread_count()
    if threads == 1:
        return keyframes, [work(k) for k in keyframes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return keyframes, list(pool.map(work, keyframes))


def run_pipeline(config: RunConfig) -> int:
    """All stages for every keyframe; exit 0 iff every keyframe fused.

    Failures carry their stage name; the first failing keyframe's
    diagnostic is raised after its siblings finish.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.txt").write_text(config.echo_text(), encoding="ascii")
    ctx = load_sequence(config)

    def work(keyframe: int):
        stage_multiview(config, ctx, keyframe)
        stage_select(config, ctx, keyframe)
        stage_fuse(config, ctx, keyframe)
        if ctx.gt[keyframe] is not None:
            return evaluate_keyframe(config, ctx, keyframe)
        return []

    _, per_kf_rows = _run_over_keyframes(config, ctx, work)
    rows = [row for rows_ in per_kf_rows for row in rows_]
    if rows:
        (out / "metrics.csv").write_text(report_csv(rows), encoding="ascii")
    for stem, method, rep in rows:
        print(f"{stem} {method}: mae={rep.mean_abs_error:.4f} rmse={rep.rmse:.4f}")
    return 0


def _single_stage_driver(config: RunConfig, stage) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.txt").write_text(config.echo_text(), encoding="ascii")
    ctx = load_sequence(config)
    _run_over_keyframes(config, ctx, lambda k: stage(config, ctx, k))
    return 0


def run_multiview(config: RunConfig) -> int:
    """Hypothesis search only, for every keyframe."""
    return _single_stage_driver(config, stage_multiview)


def run_select(config: RunConfig) -> int:
    """Anchor selection only; needs an earlier search stage's outputs."""
    return _single_stage_driver(config, stage_select)


def run_fuse(config: RunConfig) -> int:
    """Fusion only; needs an earlier selection stage's outputs."""
    return _single_stage_driver(config, stage_fuse)


def run_evaluate(config: RunConfig) -> int:
    """Metric rows for whatever artifacts exist, against manifest truth."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = load_sequence(config)
    _, per_kf_rows = _run_over_keyframes(
        config, ctx, lambda k: evaluate_keyframe(config, ctx, k)
    )
    rows = [row for rows_ in per_kf_rows for row in rows_]
    (out / "metrics.csv").write_text(report_csv(rows), encoding="ascii")
    for stem, method, rep in rows:
        print(f"{stem} {method}: mae={rep.mean_abs_error:.4f} rmse={rep.rmse:.4f}")
    return 0


def run_ablation(config: RunConfig) -> int:
    """Search and select once per keyframe, then fuse per weight variant.

    Writes ``<stem>_fused_<variant>.pfm`` per variant and a combined
    ``metrics_ablation.csv`` whose method column is the variant name.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.txt").write_text(config.echo_text(), encoding="ascii")
    ctx = load_sequence(config)

    def work(keyframe: int):
        stem = ctx.stem(keyframe)
        gt = ctx.gt[keyframe]
        if gt is None:
            raise PipelineError("ablate", f"{stem}: ablation needs ground-truth depth")
        stage_multiview(config, ctx, keyframe)
        stage_select(config, ctx, keyframe)
        omega = read_omega_csv(_artifact(config, stem, "_omega.csv"))
        s = load_single_view(config, ctx, stem)
        image = ctx.frames[keyframe].image
        rows = []
        for name, factors in ABLATION_VARIANTS:
            fused_values = fuse(s, omega, config.fusion_params(), factors).values
            fused = DenseDepthMap(np.maximum(fused_values, FUSED_DEPTH_FLOOR))
            write_depth_map(fused, _artifact(config, stem, f"_fused_{name}.pfm"))
            rows.append((stem, name, error_report(fused, gt, gt.valid, image)))
        return rows

    _, per_kf_rows = _run_over_keyframes(config, ctx, work)
    rows = [row for rows_ in per_kf_rows for row in rows_]
    (out / "metrics_ablation.csv").write_text(report_csv(rows), encoding="ascii")
    for stem, method, rep in rows:
        print(f"{stem} {method}: mae={rep.mean_abs_error:.4f}")
    return 0


def manual_selection_filter(
    omega: SparseDepthSet, gt: DenseDepthMap, tol: float = 0.10
) -> SparseDepthSet:
    """Anchors whose depth is within ``tol`` meters of the truth.

    An oracle pre-filter for upper-bound experiments, not a pipeline
    stage: it consumes the truth the pipeline is trying to estimate.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    gt_at = gt.values[omega.pixels[:, 1], omega.pixels[:, 0]]
    keep = np.abs(omega.depths - gt_at) < tol
    return SparseDepthSet(omega.pixels[keep], omega.depths[keep])


# ---------------------------------------------------------------------------
# synthetic sequence generation


def generate_synthetic_sequence(
    out_dir: str | Path,
    seed: int,
    n_frames: int = 12,
    step: float = 0.03,
    intr: CameraIntrinsics | None = None,
    offset_range: float = 0.3,
    smooth_noise_amp: float = 0.15,
) -> Path:
    """Write a complete on-disk sequence a pipeline run can consume.

    Produces RGB PNGs, ground-truth and fabricated single-view depth
    maps, a trajectory, intrinsics, a manifest, the scene description,
    and a ready-to-run config file.  Everything derives from ``seed``.
    Returns the manifest path.
    """
    if intr is None:
        intr = CameraIntrinsics(fx=200.0, fy=200.0, cx=160.0, cy=120.0, width=320, height=240)
    out = Path(out_dir)
    for sub in ("rgb", "gt", "single"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    scene = random_scene(seed, intr)
    offsets = random_segment_offsets(scene, seed=seed + 1, max_abs=offset_range)
    poses = lateral_trajectory(n_frames, step).poses
    write_scene(scene, out / "scene.txt")

    entries: list[SequenceEntry] = []
    trajectory: list[tuple[float, RigidPose]] = []
    for i, pose in enumerate(poses):
        frame, gt, segments = render(scene, intr, pose, frame_id=f"frame_{i:04d}")
        s = fabricate_single_view(
            gt, segments, offsets, smooth_noise_amp=smooth_noise_amp, seed=seed + 2
        )
        ts = i / 30.0
        rgb_path = out / "rgb" / f"frame_{i:04d}.png"
        gt_path = out / "gt" / f"frame_{i:04d}.png"
        write_image(frame.image, rgb_path)
        write_depth_map(gt, gt_path)
        write_depth_map(s, out / "single" / f"frame_{i:04d}.pfm")
        entries.append(SequenceEntry(timestamp=ts, rgb=rgb_path, depth=gt_path))
        trajectory.append((ts, pose))

    write_pose_trajectory(out / "trajectory.txt", trajectory)
    write_intrinsics(intr, out / "intrinsics.txt")
    manifest_path = out / "manifest.txt"
    write_manifest(SequenceManifest(tuple(entries)), manifest_path)
    (out / "run.cfg").write_text(
        "\n".join(
            [
                "manifest = manifest.txt",
                "intrinsics = intrinsics.txt",
                "poses = trajectory.txt",
                "single_view_dir = single",
                "output_dir = out",
            ]
        )
        + "\n",
        encoding="ascii",
    )
    return manifest_path
