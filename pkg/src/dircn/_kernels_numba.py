"""Compiled direct-loop convolution kernels.

Imported lazily by :mod:`dircn._kernels` the first time the numba backend is
selected, so the default numpy configuration never pays the numba import or
JIT cost.  Loop order keeps the output-width sweep innermost over contiguous
rows with hoisted valid ranges; the stride-1 branch gives LLVM a unit-stride
affine loop it can vectorize.  fastmath is limited to reassociation and FMA
contraction so NaN and inf still propagate normally.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_FASTMATH = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FASTMATH)
def conv2d_forward(x, weight, stride, padding, groups):
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cpg = c_out // groups
    y = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            ci0 = (co // cpg) * cg
            for c in range(cg):
                ci = ci0 + c
                for ky in range(kh):
                    oy_lo = max(0, -((ky - padding) // stride))
                    oy_hi = min(oh - 1, (h - 1 + padding - ky) // stride)
                    for kx in range(kw):
                        wv = weight[co, c, ky, kx]
                        ox_lo = max(0, -((kx - padding) // stride))
                        ox_hi = min(ow - 1, (w - 1 + padding - kx) // stride)
                        off = kx - padding
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride - padding + ky
                            yrow = y[b, co, oy]
                            xrow = x[b, ci, iy]
                            if stride == 1:
                                for ox in range(ox_lo, ox_hi + 1):
                                    yrow[ox] += wv * xrow[ox + off]
                            else:
                                for ox in range(ox_lo, ox_hi + 1):
                                    yrow[ox] += wv * xrow[ox * stride + off]
    return y


@njit(cache=True, fastmath=_FASTMATH)
def conv2d_grad_input(grad_out, weight, h, w, stride, padding, groups):
    n, c_out, oh, ow = grad_out.shape
    _, cg, kh, kw = weight.shape
    cpg = c_out // groups
    gx = np.zeros((n, cg * groups, h, w), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            ci0 = (co // cpg) * cg
            for c in range(cg):
                ci = ci0 + c
                for ky in range(kh):
                    oy_lo = max(0, -((ky - padding) // stride))
                    oy_hi = min(oh - 1, (h - 1 + padding - ky) // stride)
                    for kx in range(kw):
                        wv = weight[co, c, ky, kx]
                        ox_lo = max(0, -((kx - padding) // stride))
                        ox_hi = min(ow - 1, (w - 1 + padding - kx) // stride)
                        off = kx - padding
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride - padding + ky
                            grow = grad_out[b, co, oy]
                            gxrow = gx[b, ci, iy]
                            if stride == 1:
                                for ox in range(ox_lo, ox_hi + 1):
                                    gxrow[ox + off] += wv * grow[ox]
                            else:
                                for ox in range(ox_lo, ox_hi + 1):
                                    gxrow[ox * stride + off] += wv * grow[ox]
    return gx


@njit(cache=True, fastmath=_FASTMATH)
def conv2d_grad_weight(grad_out, x, cg, kh, kw, stride, padding, groups):
    n, c_out, oh, ow = grad_out.shape
    _, _, h, w = x.shape
    cpg = c_out // groups
    gw = np.zeros((c_out, cg, kh, kw), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            ci0 = (co // cpg) * cg
            for c in range(cg):
                ci = ci0 + c
                for ky in range(kh):
                    oy_lo = max(0, -((ky - padding) // stride))
                    oy_hi = min(oh - 1, (h - 1 + padding - ky) // stride)
                    for kx in range(kw):
                        ox_lo = max(0, -((kx - padding) // stride))
                        ox_hi = min(ow - 1, (w - 1 + padding - kx) // stride)
                        off = kx - padding
                        acc = 0.0
                        for oy in range(oy_lo, oy_hi + 1):
                            iy = oy * stride - padding + ky
                            grow = grad_out[b, co, oy]
                            xrow = x[b, ci, iy]
                            if stride == 1:
                                for ox in range(ox_lo, ox_hi + 1):
                                    acc += grow[ox] * xrow[ox + off]
                            else:
                                for ox in range(ox_lo, ox_hi + 1):
                                    acc += grow[ox] * xrow[ox * stride + off]
                        gw[co, c, ky, kx] += acc
    return gw
