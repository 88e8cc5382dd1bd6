"""Reconstruction quality metrics, aggregation and CSV reports.

ssim runs through the autodiff conv kernel whether it is fed arrays or
Tensors, so the training loss and the evaluation metric share one
implementation by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F

__all__ = [
    "gaussian_window",
    "ssim",
    "nmse",
    "psnr",
    "SliceMetrics",
    "aggregate",
    "consistency_check",
    "write_metrics_csv",
    "read_metrics_csv",
]


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """2-d Gaussian kernel with unit sum (outer product of the 1-d profile)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    xs = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, target, data_range: float, window_size: int = 11, sigma: float = 1.5):
    """Mean structural similarity over valid (fully interior) windows.

    pred and target are 2-d images, numpy arrays or Tensors.  Returns a float
    for plain arrays and a Tensor when either input is a Tensor, so the same
    code serves as metric and as differentiable loss term.
    """
    tensor_out = isinstance(pred, Tensor) or isinstance(target, Tensor)
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if p.ndim != 2 or t.ndim != 2 or p.shape != t.shape:
        raise ValueError(f"ssim needs two equal 2-d images, got {p.shape} and {t.shape}")
    if p.shape[0] < window_size or p.shape[1] < window_size:
        raise ValueError(f"image {p.shape} smaller than the {window_size}x{window_size} window")
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")

    win = Tensor(gaussian_window(window_size, sigma).reshape(1, 1, window_size, window_size))
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    x = p.reshape(1, 1, *p.shape)
    y = t.reshape(1, 1, *t.shape)
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    var_x = F.conv2d(x * x, win) - mu_x * mu_x
    var_y = F.conv2d(y * y, win) - mu_y * mu_y
    cov = F.conv2d(x * y, win) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    value = (num / den).mean()
    return value if tensor_out else value.item()


def nmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Squared error normalized by the squared norm of the target."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    denom = float((t * t).sum())
    if denom == 0.0:
        raise ValueError("nmse undefined for an all-zero target")
    return float(((p - t) ** 2).sum() / denom)


def psnr(pred: np.ndarray, target: np.ndarray, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; infinite for an exact match."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    mse = float(((p - t) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


@dataclass(frozen=True)
class SliceMetrics:
    slice_id: str
    contrast: str
    acceleration: int
    ssim: float
    nmse: float
    psnr: float


def aggregate(records: list[SliceMetrics]) -> dict[str, dict[str, float]]:
    """Mean metrics per contrast plus an ALL row covering everything."""
    if not records:
        raise ValueError("nothing to aggregate")
    groups: dict[str, list[SliceMetrics]] = {"ALL": list(records)}
    for r in records:
        groups.setdefault(r.contrast, []).append(r)
    out = {}
    for name, rows in groups.items():
        out[name] = {
            "ssim": float(np.mean([r.ssim for r in rows])),
            "nmse": float(np.mean([r.nmse for r in rows])),
            "psnr": float(np.mean([r.psnr for r in rows])),
            "count": len(rows),
        }
    return out


def consistency_check(baseline: dict, improved: dict) -> dict[str, float]:
    """Relative improvements between two aggregate rows.

    dissimilarity_reduction is the relative drop of (1 - SSIM); the NMSE
    reduction is the plain relative drop.  Both are fractions, not percent.
    """
    for row in (baseline, improved):
        if not {"ssim", "nmse"} <= set(row):
            raise ValueError("aggregate rows need ssim and nmse entries")
        if row["ssim"] >= 1.0:
            raise ValueError("dissimilarity reduction undefined at ssim >= 1")
    if baseline["nmse"] <= 0:
        raise ValueError("nmse reduction undefined for a zero baseline")
    return {
        "dissimilarity_reduction": (improved["ssim"] - baseline["ssim"]) / (1.0 - baseline["ssim"]),
        "nmse_reduction": (baseline["nmse"] - improved["nmse"]) / baseline["nmse"],
    }


CSV_FIELDS = ("slice_id", "contrast", "acceleration", "ssim", "nmse", "psnr")


def write_metrics_csv(path, records: list[SliceMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            d = asdict(r)
            writer.writerow(
                [d["slice_id"], d["contrast"], d["acceleration"],
                 repr(d["ssim"]), repr(d["nmse"]), repr(d["psnr"])]
            )


def read_metrics_csv(path) -> list[SliceMetrics]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        out = []
        for row in reader:
            if len(row) != len(CSV_FIELDS):
                raise ValueError(f"{path}: malformed row {row}")
            out.append(
                SliceMetrics(row[0], row[1], int(row[2]),
                             float(row[3]), float(row[4]), float(row[5]))
            )
    return out
