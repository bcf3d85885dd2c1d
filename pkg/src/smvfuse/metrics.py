"""Depth-error metrics and the high/low gradient split.

All metrics operate on z-depth in meters over an explicit validity
mask (ground-truth sensor holes are zeros and must be masked out by
the caller, typically with gt.valid).

scale_invariant_error is the log-depth variance form: with
d = ln(est) - ln(gt) over n valid pixels,

    (1/n) sum d^2  -  (1/n^2) (sum d)^2

It is exactly zero when est is a global scaling of gt.

The gradient split classifies pixels by the local contrast of the
grayscale image (values in [0, 1]): magnitude is the max of the
absolute forward differences in x and y (zero where a difference
does not exist, i.e. last column/row), compared against a threshold.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .maps import DenseDepthMap

GRADIENT_SPLIT_THRESHOLD = 0.35

CSV_HEADER = ("sequence", "method", "rmse", "mae", "scale_inv", "n")


@dataclass(frozen=True)
class DepthErrorReport:
    """Aggregate error metrics; the gradient split is optional."""

    rmse: float
    mean_abs_error: float
    scale_invariant: float
    n_pixels: int
    median_err_high_gradient: float | None = None
    median_err_low_gradient: float | None = None

    def __post_init__(self) -> None:
        if self.n_pixels <= 0:
            raise ValueError("report needs at least one evaluated pixel")
        if self.rmse < 0 or self.mean_abs_error < 0:
            raise ValueError("error metrics cannot be negative")


def _masked_pair(est: DenseDepthMap, gt: DenseDepthMap, valid: np.ndarray):
    mask = np.asarray(valid, dtype=bool)
    if mask.shape != gt.values.shape or est.values.shape != gt.values.shape:
        raise ValueError("est, gt and mask must share one shape")
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    if np.any(gt.values[mask] <= 0):
        raise ValueError("ground truth must be positive on the valid mask")
    return est.values[mask], gt.values[mask]


def rmse(est: DenseDepthMap, gt: DenseDepthMap, valid: np.ndarray) -> float:
    """Root mean squared depth error in meters over the valid mask."""
    e, g = _masked_pair(est, gt, valid)
    return float(np.sqrt(np.mean((e - g) ** 2)))


def mean_abs_error(est: DenseDepthMap, gt: DenseDepthMap, valid: np.ndarray) -> float:
    """Mean absolute depth error in meters over the valid mask."""
    e, g = _masked_pair(est, gt, valid)
    return float(np.mean(np.abs(e - g)))


def scale_invariant_error(
    est: DenseDepthMap, gt: DenseDepthMap, valid: np.ndarray
) -> float:
    """Variance-style error on log depths; insensitive to global scale."""
    e, g = _masked_pair(est, gt, valid)
    if np.any(e <= 0):
        raise ValueError("estimate must be positive on the valid mask")
    d = np.log(e) - np.log(g)
    n = d.size
    return float(np.mean(d * d) - d.sum() ** 2 / (n * n))


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Forward-difference contrast of a [0, 1] grayscale image.

    Per pixel: max(|I(u+1,v) - I(u,v)|, |I(u,v+1) - I(u,v)|), with a
    missing difference (last column / last row) counted as zero.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D grayscale")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = np.abs(img[:, 1:] - img[:, :-1])
    gy[:-1, :] = np.abs(img[1:, :] - img[:-1, :])
    return np.maximum(gx, gy)


def gradient_split_medians(
    est: DenseDepthMap,
    gt: DenseDepthMap,
    image: np.ndarray,
    threshold: float = GRADIENT_SPLIT_THRESHOLD,
    valid: np.ndarray | None = None,
) -> tuple[float | None, float | None]:
    """Median |est - gt| over high- and low-contrast pixels.

    Returns (median_high, median_low); a class with no pixels yields
    None for its median.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold must lie in (0, 1]")
    if valid is None:
        valid = gt.valid
    mask = np.asarray(valid, dtype=bool)
    _masked_pair(est, gt, mask)
    high = gradient_magnitude(image) > threshold
    err = np.abs(est.values - gt.values)

    def _median(cls: np.ndarray) -> float | None:
        sel = mask & cls
        return float(np.median(err[sel])) if sel.any() else None

    return _median(high), _median(~high)


def error_report(
    est: DenseDepthMap,
    gt: DenseDepthMap,
    valid: np.ndarray | None = None,
    image: np.ndarray | None = None,
    threshold: float = GRADIENT_SPLIT_THRESHOLD,
) -> DepthErrorReport:
    """All metrics in one pass; the split is filled when an image is given."""
    if valid is None:
        valid = gt.valid
    med_hi = med_lo = None
    if image is not None:
        med_hi, med_lo = gradient_split_medians(est, gt, image, threshold, valid)
    return DepthErrorReport(
        rmse=rmse(est, gt, valid),
        mean_abs_error=mean_abs_error(est, gt, valid),
        scale_invariant=scale_invariant_error(est, gt, valid),
        n_pixels=int(np.count_nonzero(np.asarray(valid, dtype=bool))),
        median_err_high_gradient=med_hi,
        median_err_low_gradient=med_lo,
    )


def report_text(report: DepthErrorReport) -> str:
    """key=value lines, one metric per line, trailing newline."""
    lines = [
        f"rmse={report.rmse:.6f}",
        f"mae={report.mean_abs_error:.6f}",
        f"scale_inv={report.scale_invariant:.6f}",
        f"n={report.n_pixels}",
    ]
    if report.median_err_high_gradient is not None:
        lines.append(f"median_high_gradient={report.median_err_high_gradient:.6f}")
    if report.median_err_low_gradient is not None:
        lines.append(f"median_low_gradient={report.median_err_low_gradient:.6f}")
    return "\n".join(lines) + "\n"


def report_csv(rows: list[tuple[str, str, DepthErrorReport]]) -> str:
    """CSV with columns (sequence, method, rmse, mae, scale_inv, n)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for sequence, method, rep in rows:
        writer.writerow(
            [
                sequence,
                method,
                f"{rep.rmse:.6f}",
                f"{rep.mean_abs_error:.6f}",
                f"{rep.scale_invariant:.6f}",
                rep.n_pixels,
            ]
        )
    return buf.getvalue()
