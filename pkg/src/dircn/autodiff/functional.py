"""Differentiable operations that are not Tensor methods.

Structural ops (concat, pad), neural-network layers (conv2d,
conv_transpose2d, linear, instance_norm, global_avg_pool), the centered
Fourier pair, and complex arithmetic on the (real, imag) channel-pair
layout.  Convolution forward/backward work is delegated to dircn._kernels.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels, fourier
from .tensor import Tensor

__all__ = [
    "concat",
    "pad2d",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "instance_norm",
    "global_avg_pool",
    "fft2c",
    "ifft2c",
    "complex_mul",
    "complex_conj",
    "complex_abs",
    "rss",
]


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(tensors), vjp)


def pad2d(x: Tensor, pad: tuple[int, int, int, int], mode: str = "reflect") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = (int(p) for p in pad)
    if min(top, bottom, left, right) < 0:
        raise ValueError(f"negative padding {pad}")
    if x.ndim < 2:
        raise ValueError(f"pad2d needs at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2:]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(x.data, widths)

        def vjp(g, a=x):
            return (g[..., top : top + h, left : left + w],)

        return Tensor(out, (x,), vjp)
    if mode == "reflect":
        rows = np.pad(np.arange(h), (top, bottom), mode="reflect")
        cols = np.pad(np.arange(w), (left, right), mode="reflect")
        index = (Ellipsis, rows[:, None], cols[None, :])
        out = x.data[index]

        def vjp(g, a=x):
            gx = np.zeros(a.shape)
            np.add.at(gx, index, g)
            return (gx,)

        return Tensor(out, (x,), vjp)
    raise ValueError(f"unknown pad mode {mode!r}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-d cross-correlation with odd square-ish kernels.

    x is (N, C_in, H, W), weight is (C_out, C_in // groups, kh, kw) with odd
    kh and kw, bias is (C_out,) or None.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d needs 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernels must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding {stride}/{padding}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if cg != c_in // groups:
        raise ValueError(f"weight expects {cg * groups} input channels, input has {c_in}")
    oh = _kernels.conv_output_size(h, kh, stride, padding)
    ow = _kernels.conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")

    y = _kernels.conv2d_forward(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv2d_grad_input(g, weight.data, (h, w), stride, padding, groups)
        gw = _kernels.conv2d_grad_weight(g, x.data, weight.shape, stride, padding, groups)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(y, parents, vjp)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Transposed 2-d convolution (adjoint of conv2d with the same geometry).

    x is (N, C_in, H, W), weight is (C_in, C_out // groups, kh, kw), output
    spatial size is (H - 1) * stride - 2 * padding + kh.  With the default
    kernel 2, stride 2 the output is exactly 2H x 2W with no overlap.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d needs 4-d input and weight")
    n, c_in, h, w = x.shape
    wc_in, cg, kh, kw = weight.shape
    if wc_in != c_in:
        raise ValueError(f"weight expects {wc_in} input channels, input has {c_in}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding {stride}/{padding}")
    if groups < 1 or c_in % groups:
        raise ValueError(f"groups={groups} must divide C_in={c_in}")
    c_out = cg * groups
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ValueError("conv_transpose2d output would be empty")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")

    # The transpose of a conv mapping (N, c_out, oh, ow) -> (N, c_in, h, w):
    # forward here is that conv's input gradient, backward its forward.
    y = _kernels.conv2d_grad_input(x.data, weight.data, (oh, ow), stride, padding, groups)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv2d_forward(g, weight.data, stride, padding, groups)
        gw = _kernels.conv2d_grad_weight(x.data, g, weight.shape, stride, padding, groups)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(y, parents, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map; weight is (in_features, out_features)."""
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over H and W, no affine part."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm needs (N, C, H, W), got {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("instance_norm needs at least 2 spatial elements")
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    return centered / (var + eps).sqrt()


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool needs (N, C, H, W), got {x.shape}")
    return x.mean(axis=(2, 3))


def _check_channel_pair(x: Tensor, op: str) -> None:
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ValueError(f"{op} needs a size-2 axis at position -3, got shape {x.shape}")


def fft2c(x: Tensor) -> Tensor:
    """Centered orthonormal FFT on a channel-pair tensor (..., 2, H, W).

    The transform is unitary, so the backward pass is the inverse transform.
    """
    _check_channel_pair(x, "fft2c")
    out = fourier.complex_to_channels(fourier.fft2c(fourier.channels_to_complex(x.data)))

    def vjp(g):
        return (fourier.complex_to_channels(fourier.ifft2c(fourier.channels_to_complex(g))),)

    return Tensor(out, (x,), vjp)


def ifft2c(x: Tensor) -> Tensor:
    """Inverse of :func:`fft2c` on a channel-pair tensor."""
    _check_channel_pair(x, "ifft2c")
    out = fourier.complex_to_channels(fourier.ifft2c(fourier.channels_to_complex(x.data)))

    def vjp(g):
        return (fourier.complex_to_channels(fourier.fft2c(fourier.channels_to_complex(g))),)

    return Tensor(out, (x,), vjp)


def complex_mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise complex product of two channel-pair tensors (broadcasts)."""
    _check_channel_pair(a, "complex_mul")
    _check_channel_pair(b, "complex_mul")
    ar, ai = a[..., 0:1, :, :], a[..., 1:2, :, :]
    br, bi = b[..., 0:1, :, :], b[..., 1:2, :, :]
    return concat([ar * br - ai * bi, ar * bi + ai * br], axis=-3)


def complex_conj(a: Tensor) -> Tensor:
    _check_channel_pair(a, "complex_conj")
    return concat([a[..., 0:1, :, :], -a[..., 1:2, :, :]], axis=-3)


def complex_abs(a: Tensor) -> Tensor:
    """Pointwise magnitude; collapses the channel pair: (..., 2, H, W) -> (..., H, W)."""
    _check_channel_pair(a, "complex_abs")
    return (a * a).sum(axis=-3).sqrt()


def rss(x: Tensor) -> Tensor:
    """Root sum of squares over coils and the channel pair: (C, 2, H, W) -> (H, W)."""
    if x.ndim != 4 or x.shape[1] != 2:
        raise ValueError(f"rss needs (coils, 2, H, W), got {x.shape}")
    return (x * x).sum(axis=(0, 1)).sqrt()
