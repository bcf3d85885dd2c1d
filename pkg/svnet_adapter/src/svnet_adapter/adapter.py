"""Batch single-view depth prediction over a sequence manifest.

The adapter is deliberately decoupled from any particular consumer: it
reads the plain-text manifest format (``timestamp rgb [depth]`` per
line), runs a depth model over each RGB frame, and writes standard PFM
float maps.  Anything that reads PFM can consume the output directly.

Models are pluggable through the ``MODELS`` registry.  A registry entry
is a factory taking no arguments and returning a callable that maps a
grayscale image in [0, 1] (shape ``(height, width)``) to a metric depth
map of the same shape.  ``torchhub:<repo>:<name>`` names load a torch
hub model instead; any failure there surfaces as ``ModelLoadError`` so
callers can exit nonzero rather than write bogus maps.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

# Predictions are clamped into this metric range; a network emitting
# NaN or infinity must not poison downstream fusion.
DEPTH_MIN = 0.25
DEPTH_MAX = 10.0

ModelFn = Callable[[np.ndarray], np.ndarray]


class ModelLoadError(RuntimeError):
    """Raised when the requested depth model cannot be constructed."""


@dataclass
class AdapterConfig:
    """Everything one batch prediction run needs.

    ``width`` and ``height`` give the model's native working resolution;
    input frames are resampled to it before prediction and the depth map
    is written at that resolution.
    """

    model: str
    manifest: Path
    out_dir: Path
    width: int = 320
    height: int = 240


def _box_blur(values: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur with edge replication."""
    out = values.astype(np.float64)
    window = 2 * radius + 1
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        out = sliding_window_view(padded, window, axis=axis).mean(axis=-1)
    return out


def smooth_shading_model() -> ModelFn:
    """Deterministic heuristic predictor.

    Combines a ground-plane prior (rows near the image bottom are close)
    with smoothed brightness (brighter regions read as nearer).  Output
    stays comfortably inside [DEPTH_MIN, DEPTH_MAX] by construction.
    """

    def predict(image: np.ndarray) -> np.ndarray:
        h, w = image.shape
        rows = np.linspace(1.0, 0.0, h).reshape(h, 1)
        base = 2.0 + 6.0 * rows
        shading = _box_blur(image, radius=4)
        return base - 1.5 * (shading - 0.5)

    return predict


def _torch_hub_model(spec: str) -> ModelFn:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ModelLoadError(
            f"torch hub model name must look like torchhub:<repo>:<name>, got {spec!r}"
        )
    _, repo, name = parts
    try:
        import torch

        net = torch.hub.load(repo, name)
        net.eval()
    except Exception as exc:
        raise ModelLoadError(f"failed to load torch hub model {spec!r}: {exc}") from exc

    def predict(image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            tensor = torch.from_numpy(image[None, None].astype(np.float32))
            return net(tensor).squeeze().numpy().astype(np.float64)

    return predict


MODELS: Dict[str, Callable[[], ModelFn]] = {
    "smooth": smooth_shading_model,
}


def load_model(name: str) -> ModelFn:
    """Resolve a model name to a prediction callable.

    Unknown names and torch hub failures raise ``ModelLoadError``.
    """
    if name.startswith("torchhub:"):
        return _torch_hub_model(name)
    factory = MODELS.get(name)
    if factory is None:
        known = ", ".join(sorted(MODELS))
        raise ModelLoadError(f"unknown model {name!r} (available: {known})")
    return factory()


def _read_manifest_rgb(path: Path) -> List[Path]:
    """Return the RGB file per manifest line, resolved against the manifest dir."""
    if not path.is_file():
        raise FileNotFoundError(f"manifest file not found: {path}")
    base = path.parent
    frames: List[Path] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (2, 3):
            raise ValueError(
                f"{path}:{lineno}: expected 'timestamp rgb [depth]', got {len(fields)} fields"
            )
        rgb = Path(fields[1])
        if not rgb.is_absolute():
            rgb = base / rgb
        if not rgb.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: rgb file not found: {rgb}")
        frames.append(rgb)
    if not frames:
        raise ValueError(f"{path}: manifest lists no frames")
    return frames


def _load_gray(path: Path, width: int, height: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != (width, height):
        img = img.resize((width, height), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def _write_pfm(path: Path, values: np.ndarray) -> None:
    data = np.ascontiguousarray(np.flipud(values.astype(np.float32)))
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(struct.pack(f"<{h * w}f", *data.ravel()))


def _sanitize(depth: np.ndarray, source: Path) -> np.ndarray:
    """Force predictions into [DEPTH_MIN, DEPTH_MAX], warning on non-finite."""
    bad = ~np.isfinite(depth)
    if bad.any():
        warnings.warn(
            f"{source.name}: {int(bad.sum())} non-finite predictions clamped "
            f"into [{DEPTH_MIN}, {DEPTH_MAX}]",
            RuntimeWarning,
            stacklevel=2,
        )
        depth = np.nan_to_num(depth, nan=DEPTH_MIN, posinf=DEPTH_MAX, neginf=DEPTH_MIN)
    return np.clip(depth, DEPTH_MIN, DEPTH_MAX)


def predict_batch(config: AdapterConfig) -> List[Tuple[Path, Path]]:
    """Predict depth for every manifest frame.

    Writes ``<rgb stem>.pfm`` per frame into ``config.out_dir`` plus a
    ``predictions.csv`` sidecar mapping each rgb file name to its depth
    file name.  Returns the (rgb_path, depth_path) pairs in manifest
    order.  Reruns over unchanged inputs reproduce the same bytes.
    """
    model = load_model(config.model)
    frames = _read_manifest_rgb(config.manifest)
    config.out_dir.mkdir(parents=True, exist_ok=True)

    pairs: List[Tuple[Path, Path]] = []
    for rgb in frames:
        image = _load_gray(rgb, config.width, config.height)
        depth = np.asarray(model(image), dtype=np.float64)
        if depth.shape != image.shape:
            raise ValueError(
                f"model output shape {depth.shape} does not match "
                f"input shape {image.shape}"
            )
        depth = _sanitize(depth, rgb)
        out_path = config.out_dir / f"{rgb.stem}.pfm"
        _write_pfm(out_path, depth)
        pairs.append((rgb, out_path))

    sidecar = config.out_dir / "predictions.csv"
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rgb", "depth"])
        for rgb, out_path in pairs:
            writer.writerow([rgb.name, out_path.name])
    return pairs
