"""Acquisition physics: undersampling masks, coil algebra, preprocessing.

Conventions: raw k-space is complex128 shaped (coils, H, W); the phase-encode
direction is the last axis, so masks select columns.  Inside the network,
complex arrays travel as float64 channel pairs (coils, 2, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fourier
from .autodiff import Tensor
from .autodiff import functional as F

__all__ = [
    "CENTER_FRACTIONS",
    "SamplingMask",
    "make_equispaced_mask",
    "apply_mask",
    "simulate_acquisition",
    "rss",
    "zero_filled",
    "Sample",
    "preprocess",
    "coil_reduce",
    "coil_expand",
]

# default fully sampled center fraction per acceleration factor
CENTER_FRACTIONS = {4: 0.08, 8: 0.04}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SamplingMask:
    """Column mask over the phase-encode axis.

    kept marks acquired lines, center marks the fully sampled low-frequency
    block (a subset of kept).  acceleration and center_fraction record the
    request that produced the mask; realized_acceleration reports what was
    actually achieved.
    """

    kept: np.ndarray
    center: np.ndarray
    acceleration: int
    center_fraction: float

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        center = np.asarray(self.center, dtype=bool)
        if kept.ndim != 1 or kept.shape != center.shape:
            raise ValueError("kept and center must be 1-d arrays of equal length")
        if (center & ~kept).any():
            raise ValueError("center lines must be a subset of kept lines")
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "center", center)

    @property
    def n_ky(self) -> int:
        return self.kept.shape[0]

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    @property
    def n_center(self) -> int:
        return int(self.center.sum())

    @property
    def realized_acceleration(self) -> float:
        return self.n_ky / self.n_kept

    @property
    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    def kept_weights(self, ndim: int) -> np.ndarray:
        """kept as float64, shaped to broadcast along the last of ndim axes."""
        return self.kept.astype(np.float64).reshape((1,) * (ndim - 1) + (self.n_ky,))

    def center_weights(self, ndim: int) -> np.ndarray:
        return self.center.astype(np.float64).reshape((1,) * (ndim - 1) + (self.n_ky,))


def make_equispaced_mask(
    n_ky: int, acceleration: int, center_fraction: float, offset: int = 0
) -> SamplingMask:
    """Fully sampled center block plus equispaced outer lines.

    The number of kept lines is exactly round(n_ky / acceleration) (half up):
    the center block takes round(center_fraction * n_ky) of that budget, the
    remainder is taken from the non-center candidates at a rounded stride,
    then lines farthest from the array center are added or removed until the
    count is exact (ties break toward the lower index).
    """
    if n_ky < 1:
        raise ValueError(f"n_ky must be positive, got {n_ky}")
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    if not 0.0 <= center_fraction <= 1.0:
        raise ValueError(f"center_fraction must lie in [0, 1], got {center_fraction}")
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")

    n_total = _round_half_up(n_ky / acceleration)
    n_center = _round_half_up(center_fraction * n_ky)
    if n_center > n_total:
        raise ValueError(
            f"center block ({n_center} lines) exceeds the keep budget ({n_total}) "
            f"for n_ky={n_ky}, R={acceleration}, cf={center_fraction}"
        )

    center = np.zeros(n_ky, dtype=bool)
    start = n_ky // 2 - n_center // 2
    center[start : start + n_center] = True
    kept = center.copy()

    candidates = np.flatnonzero(~center)
    rest = n_total - n_center
    if rest > 0 and candidates.size:
        stride = max(1, _round_half_up(candidates.size / rest))
        kept[candidates[offset % stride :: stride]] = True

    # distance from the geometric center; ties resolved toward lower index
    mid = (n_ky - 1) / 2.0

    def outermost(indices: np.ndarray) -> int:
        dist = np.abs(indices - mid)
        return int(indices[np.argmax(dist)])

    while kept.sum() > n_total:
        removable = np.flatnonzero(kept & ~center)
        kept[outermost(removable)] = False
    while kept.sum() < n_total:
        addable = np.flatnonzero(~kept)
        kept[outermost(addable)] = True

    return SamplingMask(kept, center, acceleration, center_fraction)


def apply_mask(k: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Zero every non-kept column; works on any array with ky last."""
    k = np.asarray(k)
    if k.shape[-1] != mask.n_ky:
        raise ValueError(f"mask covers {mask.n_ky} lines, array has {k.shape[-1]}")
    return k * mask.kept


def rss(coil_images: np.ndarray) -> np.ndarray:
    """Root sum of squares over the leading coil axis."""
    coil_images = np.asarray(coil_images)
    if coil_images.ndim < 3:
        raise ValueError(f"expected (coils, H, W), got shape {coil_images.shape}")
    return np.sqrt((np.abs(coil_images) ** 2).sum(axis=0))


def simulate_acquisition(
    image: np.ndarray,
    sens: np.ndarray,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Forward model: per-coil FFT of the sensitivity-weighted image plus noise.

    Noise is circular complex Gaussian with total standard deviation
    noise_sigma (each real component sigma / sqrt(2)).
    """
    image = np.asarray(image)
    sens = np.asarray(sens)
    if image.ndim != 2 or sens.ndim != 3 or sens.shape[1:] != image.shape:
        raise ValueError(f"shape mismatch: image {image.shape}, sens {sens.shape}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    k = fourier.fft2c(sens * image[None])
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        scale = noise_sigma / np.sqrt(2.0)
        k = k + rng.normal(0.0, scale, k.shape) + 1j * rng.normal(0.0, scale, k.shape)
    return k


def zero_filled(k_u: np.ndarray) -> np.ndarray:
    """RSS image straight from undersampled k-space, the reference baseline."""
    return rss(fourier.ifft2c(k_u))


@dataclass(frozen=True)
class Sample:
    """One network-ready slice: masked k-space channel pair plus target."""

    kspace: np.ndarray  # (coils, 2, H, W) float64, already masked
    mask: SamplingMask
    target: np.ndarray  # (H, W) float64 RSS magnitude
    data_range: float
    contrast: str = ""


def preprocess(
    k_full: np.ndarray,
    acceleration: int,
    center_fraction: float | None = None,
    offset: int = 0,
    contrast: str = "",
) -> Sample:
    """Crop to the central square, build the target, mask the k-space.

    The coil images are cropped in image space to min(H, W) on both axes, the
    target is their RSS, and the returned k-space is the masked transform of
    the cropped coils.  center_fraction defaults by acceleration (8% at 4x,
    4% at 8x).
    """
    k_full = np.asarray(k_full)
    if k_full.ndim != 3 or not np.iscomplexobj(k_full):
        raise ValueError(f"expected complex (coils, H, W), got {k_full.dtype} {k_full.shape}")
    if center_fraction is None:
        if acceleration not in CENTER_FRACTIONS:
            raise ValueError(
                f"no default center fraction for R={acceleration}; pass one explicitly"
            )
        center_fraction = CENTER_FRACTIONS[acceleration]

    _, h, w = k_full.shape
    m = min(h, w)
    imgs = fourier.ifft2c(k_full)
    r0, c0 = (h - m) // 2, (w - m) // 2
    cropped = imgs[:, r0 : r0 + m, c0 : c0 + m]
    target = rss(cropped)
    mask = make_equispaced_mask(m, acceleration, center_fraction, offset)
    k_u = apply_mask(fourier.fft2c(cropped), mask)
    return Sample(
        kspace=fourier.complex_to_channels(k_u),
        mask=mask,
        target=target,
        data_range=float(target.max()),
        contrast=contrast,
    )


def coil_reduce(k: Tensor, sens: Tensor) -> Tensor:
    """Combine coil k-space into one image: sum_j conj(S_j) * IFFT(k_j).

    k and sens are channel pairs (coils, 2, H, W); the result is (1, 2, H, W).
    """
    if k.ndim != 4 or k.shape[1] != 2:
        raise ValueError(f"coil_reduce expects (coils, 2, H, W), got {k.shape}")
    if sens.shape != k.shape:
        raise ValueError(f"sens shape {sens.shape} does not match k {k.shape}")
    imgs = F.ifft2c(k)
    combined = F.complex_mul(imgs, F.complex_conj(sens)).sum(axis=0)
    return combined.reshape((1,) + combined.shape)


def coil_expand(image: Tensor, sens: Tensor) -> Tensor:
    """Project a combined image (1, 2, H, W) onto coils: S_j * x."""
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 2:
        raise ValueError(f"coil_expand expects (1, 2, H, W), got {image.shape}")
    if sens.ndim != 4 or sens.shape[1:] != image.shape[1:]:
        raise ValueError(f"sens shape {sens.shape} does not match image {image.shape}")
    return F.complex_mul(image, sens)
