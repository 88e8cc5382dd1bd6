"""Hot convolution kernels with two interchangeable backends.

The 2-d convolution forward pass and its two backward passes dominate the
runtime of training, so each exists twice: a pure-numpy im2col/col2im version
whose contractions run through BLAS, and a compiled direct-loop version in
:mod:`dircn._kernels_numba`.  On machines with a tuned BLAS the numpy path
measured faster at production tile sizes (see benchmarks/bench_kernels.py),
so "auto" resolves to numpy; the numba path is worth selecting on platforms
with a weak BLAS or for very small tiles.

The initial backend comes from the DIRCN_KERNELS environment variable
("auto", "numba" or "numpy") and can be switched at runtime with
:func:`set_backend`, which the benchmark script uses to time both paths in
one process.  numba is imported only when that backend is first selected.

Shapes follow the usual convention:

    x        (N, C_in, H, W)
    weight   (C_out, C_in // groups, kh, kw)
    y        (N, C_out, OH, OW) with OH = (H + 2 * padding - kh) // stride + 1

Callers validate shapes; these kernels assume coherent arguments.
"""

from __future__ import annotations

import importlib.util
import os

import numpy as np

__all__ = [
    "HAS_NUMBA",
    "active_backend",
    "set_backend",
    "conv2d_forward",
    "conv2d_grad_input",
    "conv2d_grad_weight",
    "conv_output_size",
]

_CHOICES = ("auto", "numba", "numpy")

HAS_NUMBA = importlib.util.find_spec("numba") is not None
_numba_kernels = None


def _load_numba():
    global _numba_kernels
    if _numba_kernels is None:
        from . import _kernels_numba

        _numba_kernels = _kernels_numba
    return _numba_kernels


def _resolve(name: str) -> str:
    if name not in _CHOICES:
        raise ValueError(f"backend must be one of {_CHOICES}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not available")
    if name == "auto":
        return "numpy"
    return name


_env = os.environ.get("DIRCN_KERNELS", "auto").strip().lower()
if _env not in _CHOICES:
    raise ValueError(f"DIRCN_KERNELS must be one of {_CHOICES}, got {_env!r}")
_BACKEND = _resolve(_env)


def active_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    """Select "numba" or "numpy" for subsequent kernel calls ("auto" resolves)."""
    global _BACKEND
    _BACKEND = _resolve(name)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy path: im2col / col2im
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Strided view (N, C, kh, kw, OH, OW) over the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def _conv2d_forward_np(x, weight, stride, padding, groups):
    n, c_in, _, _ = x.shape
    c_out, cg, kh, kw = weight.shape
    cols = _im2col(x, kh, kw, stride, padding)
    oh, ow = cols.shape[4], cols.shape[5]
    cols = cols.reshape(n, groups, cg * kh * kw, oh * ow)
    wmat = weight.reshape(groups, c_out // groups, cg * kh * kw)
    y = np.matmul(wmat[None], cols)
    return y.reshape(n, c_out, oh, ow)


def _conv2d_grad_weight_np(grad_out, x, weight_shape, stride, padding, groups):
    c_out, cg, kh, kw = weight_shape
    n = x.shape[0]
    cols = _im2col(x, kh, kw, stride, padding)
    oh, ow = cols.shape[4], cols.shape[5]
    cols = cols.reshape(n, groups, cg * kh * kw, oh * ow)
    gmat = grad_out.reshape(n, groups, c_out // groups, oh * ow)
    gw = np.matmul(gmat, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape(c_out, cg, kh, kw)


def _conv2d_grad_input_np(grad_out, weight, input_hw, stride, padding, groups):
    n, c_out, oh, ow = grad_out.shape
    _, cg, kh, kw = weight.shape
    h, w = input_hw
    c_in = cg * groups
    wmat = weight.reshape(groups, c_out // groups, cg * kh * kw)
    gmat = grad_out.reshape(n, groups, c_out // groups, oh * ow)
    gcols = np.matmul(wmat.transpose(0, 2, 1)[None], gmat)
    gcols = gcols.reshape(n, c_in, kh, kw, oh, ow)
    gx = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    for ky in range(kh):
        for kx in range(kw):
            gx[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += gcols[
                :, :, ky, kx
            ]
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gx)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _c64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, weight, stride=1, padding=0, groups=1):
    x, weight = _c64(x), _c64(weight)
    if _BACKEND == "numba":
        return _load_numba().conv2d_forward(x, weight, stride, padding, groups)
    return _conv2d_forward_np(x, weight, stride, padding, groups)


def conv2d_grad_input(grad_out, weight, input_hw, stride=1, padding=0, groups=1):
    grad_out, weight = _c64(grad_out), _c64(weight)
    h, w = input_hw
    if _BACKEND == "numba":
        return _load_numba().conv2d_grad_input(grad_out, weight, h, w, stride, padding, groups)
    return _conv2d_grad_input_np(grad_out, weight, (h, w), stride, padding, groups)


def conv2d_grad_weight(grad_out, x, weight_shape, stride=1, padding=0, groups=1):
    grad_out, x = _c64(grad_out), _c64(x)
    c_out, cg, kh, kw = weight_shape
    if _BACKEND == "numba":
        return _load_numba().conv2d_grad_weight(grad_out, x, cg, kh, kw, stride, padding, groups)
    return _conv2d_grad_weight_np(grad_out, x, weight_shape, stride, padding, groups)
