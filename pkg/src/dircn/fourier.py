"""Centered, orthonormal 2-d Fourier transforms and complex layout helpers.

k-space and image arrays are complex128 with the two spatial axes last.
Network code carries complex data as a real channel pair instead: a size-2
axis at position -3 holding (real, imag) planes.  The converters below map
between the two layouts.
"""

from __future__ import annotations

import numpy as np

__all__ = ["fft2c", "ifft2c", "complex_to_channels", "channels_to_complex"]


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-d FFT over the last two axes.

    The zero-frequency bin of the result sits at (H // 2, W // 2).  A unit
    impulse at that center maps to the constant 1 / sqrt(H * W), and the
    transform preserves the l2 norm.
    """
    x = np.asarray(x)
    shifted = np.fft.ifftshift(x, axes=(-2, -1))
    k = np.fft.fft2(shifted, norm="ortho")
    return np.fft.fftshift(k, axes=(-2, -1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    k = np.asarray(k)
    shifted = np.fft.ifftshift(k, axes=(-2, -1))
    x = np.fft.ifft2(shifted, norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


def complex_to_channels(x: np.ndarray) -> np.ndarray:
    """Split a complex array (..., H, W) into a real pair (..., 2, H, W)."""
    x = np.asarray(x)
    return np.stack((x.real.astype(np.float64), x.imag.astype(np.float64)), axis=-3)


def channels_to_complex(x: np.ndarray) -> np.ndarray:
    """Join a real channel pair (..., 2, H, W) into complex (..., H, W)."""
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ValueError(f"expected a size-2 axis at position -3, got shape {x.shape}")
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]
