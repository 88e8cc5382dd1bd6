"""Finite-difference verification of reverse-mode gradients.

grad_check perturbs every element of every input and compares central
differences against the gradients the engine reports.  CHECKS holds one
registered case per differentiable op; run_checks executes them all and
backs both the `dircn gradcheck` command and the acceptance tests.  For
whole networks, where elementwise probing is too slow, directional_grad_check
and sampled_grad_check compare random projections of the gradient instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .tensor import Tensor

__all__ = [
    "grad_check",
    "directional_grad_check",
    "sampled_grad_check",
    "run_checks",
    "CheckResult",
    "CHECKS",
]

_STEP_RANGE = (1e-7, 1e-4)


def _check_step(step: float) -> None:
    lo, hi = _STEP_RANGE
    if not (lo <= step <= hi):
        raise ValueError(f"step {step} outside [{lo}, {hi}]")


def grad_check(fn: Callable[..., Tensor], inputs, step: float = 1e-6) -> float:
    """Max relative error between autodiff and central-difference gradients.

    fn must map the given Tensors to a scalar Tensor and be deterministic.
    Every element of every input is perturbed by +-step.  The relative error
    for one element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    _check_step(step)
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"fn must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, grads in zip(inputs, analytic):
        for flat_index in range(t.size):
            idx = np.unravel_index(flat_index, t.shape) if t.shape else ()
            orig = t.data[idx]
            t.data[idx] = orig + step
            f_plus = fn(*inputs).item()
            t.data[idx] = orig - step
            f_minus = fn(*inputs).item()
            t.data[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = grads[idx]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def directional_grad_check(
    fn: Callable[[], Tensor],
    params,
    rng: np.random.Generator,
    step: float = 1e-6,
    directions: int = 2,
) -> float:
    """Compare <grad, v> against central differences along random unit v.

    fn recomputes the scalar loss from the current parameter data, so one
    call checks the full gradient of arbitrarily deep models at the cost of
    two evaluations per direction.
    """
    _check_step(step)
    params = list(params)
    for p in params:
        p.zero_grad()
    fn().backward()
    grads = [p.grad.copy() for p in params]
    saved = [p.data.copy() for p in params]

    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        dot = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        for p, v in zip(params, vs):
            p.data += step * v
        f_plus = fn().item()
        for p, s, v in zip(params, saved, vs):
            p.data[...] = s - step * v
        f_minus = fn().item()
        for p, s in zip(params, saved):
            p.data[...] = s
        fd = (f_plus - f_minus) / (2.0 * step)
        worst = max(worst, abs(dot - fd) / max(abs(dot), abs(fd), 1e-8))
    return worst


def sampled_grad_check(
    fn: Callable[[], Tensor],
    params,
    rng: np.random.Generator,
    samples: int = 30,
    step: float = 1e-6,
) -> float:
    """Elementwise check on a random subset of parameter coordinates."""
    _check_step(step)
    params = list(params)
    for p in params:
        p.zero_grad()
    fn().backward()
    grads = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    chosen = rng.choice(total, size=min(samples, total), replace=False)

    worst = 0.0
    for flat in sorted(int(c) for c in chosen):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[pi]
        idx = np.unravel_index(flat - offsets[pi], p.shape) if p.shape else ()
        orig = p.data[idx]
        p.data[idx] = orig + step
        f_plus = fn().item()
        p.data[idx] = orig - step
        f_minus = fn().item()
        p.data[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        ad = grads[pi][idx]
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# per-op registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool


CHECKS: list[tuple[str, Callable]] = []


def _register(name: str):
    if any(existing == name for existing, _ in CHECKS):
        raise ValueError(f"duplicate gradcheck registration {name!r}")

    def deco(builder):
        CHECKS.append((name, builder))
        return builder

    return deco


def _weighted(op: Callable, *inputs: Tensor) -> tuple[Callable, list[Tensor]]:
    """Reduce op output to a scalar with a fixed random projection."""
    probe = op(*inputs)
    w = np.random.default_rng(99).standard_normal(probe.shape)

    def fn(*ts):
        return (op(*ts) * w).sum()

    return fn, list(inputs)


def _t(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = low + np.abs(data)
    return Tensor(data)


@_register("add")
def _(rng):
    return _weighted(lambda a, b: a + b, _t(rng, 3, 4), _t(rng, 3, 4))


@_register("sub")
def _(rng):
    return _weighted(lambda a, b: a - b, _t(rng, 3, 4), _t(rng, 1, 4))


@_register("mul")
def _(rng):
    return _weighted(lambda a, b: a * b, _t(rng, 2, 3, 4), _t(rng, 3, 1))


@_register("div")
def _(rng):
    return _weighted(lambda a, b: a / b, _t(rng, 3, 4), _t(rng, 3, 4, low=0.5))


@_register("neg")
def _(rng):
    return _weighted(lambda a: -a, _t(rng, 3, 4))


@_register("sum")
def _(rng):
    return _weighted(lambda a: a.sum(axis=(0, 2)), _t(rng, 2, 3, 4))


@_register("mean")
def _(rng):
    return _weighted(lambda a: a.mean(axis=1, keepdims=True), _t(rng, 2, 3, 4))


@_register("reshape")
def _(rng):
    return _weighted(lambda a: a.reshape(6, 2), _t(rng, 3, 4))


@_register("slice")
def _(rng):
    return _weighted(lambda a: a[1:3, ::2], _t(rng, 4, 6))


@_register("concat")
def _(rng):
    return _weighted(lambda a, b: F.concat([a, b], axis=1), _t(rng, 2, 3), _t(rng, 2, 2))


@_register("abs")
def _(rng):
    return _weighted(lambda a: a.abs(), _t(rng, 3, 4, low=0.2))


@_register("sqrt")
def _(rng):
    return _weighted(lambda a: a.sqrt(), _t(rng, 3, 4, low=0.2))


@_register("sigmoid")
def _(rng):
    return _weighted(lambda a: a.sigmoid(), _t(rng, 3, 4))


@_register("silu")
def _(rng):
    return _weighted(lambda a: a.silu(), _t(rng, 3, 4))


@_register("softplus")
def _(rng):
    return _weighted(lambda a: a.softplus(), _t(rng, 3, 4))


@_register("matmul")
def _(rng):
    return _weighted(lambda a, b: a @ b, _t(rng, 3, 4), _t(rng, 4, 2))


@_register("pad_reflect")
def _(rng):
    return _weighted(lambda a: F.pad2d(a, (1, 2, 2, 1), "reflect"), _t(rng, 2, 4, 5))


@_register("pad_zero")
def _(rng):
    return _weighted(lambda a: F.pad2d(a, (1, 0, 0, 2), "zero"), _t(rng, 2, 4, 5))


@_register("conv2d")
def _(rng):
    x = _t(rng, 2, 4, 5, 6)
    w = _t(rng, 6, 2, 3, 3)
    b = _t(rng, 6)
    return _weighted(
        lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1, groups=2), x, w, b
    )


@_register("conv_transpose2d")
def _(rng):
    x = _t(rng, 2, 3, 4, 5)
    w = _t(rng, 3, 4, 2, 2)
    b = _t(rng, 4)
    return _weighted(lambda x, w, b: F.conv_transpose2d(x, w, b, stride=2), x, w, b)


@_register("linear")
def _(rng):
    return _weighted(F.linear, _t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2))


@_register("instance_norm")
def _(rng):
    return _weighted(F.instance_norm, _t(rng, 2, 3, 4, 4))


@_register("global_avg_pool")
def _(rng):
    return _weighted(F.global_avg_pool, _t(rng, 2, 3, 4, 4))


@_register("fft2c")
def _(rng):
    return _weighted(F.fft2c, _t(rng, 3, 2, 4, 6))


@_register("ifft2c")
def _(rng):
    return _weighted(F.ifft2c, _t(rng, 3, 2, 6, 4))


@_register("complex_mul")
def _(rng):
    return _weighted(F.complex_mul, _t(rng, 1, 2, 4, 4), _t(rng, 3, 2, 4, 4))


@_register("complex_conj")
def _(rng):
    return _weighted(F.complex_conj, _t(rng, 2, 2, 3, 4))


@_register("complex_abs")
def _(rng):
    return _weighted(F.complex_abs, _t(rng, 2, 2, 4, 4, low=0.3))


@_register("rss")
def _(rng):
    return _weighted(F.rss, _t(rng, 3, 2, 4, 4, low=0.3))


def run_checks(tol: float = 1e-5, step: float = 1e-6, seed: int = 7) -> list[CheckResult]:
    """Run every registered op check; one result per op, in registry order."""
    results = []
    for name, builder in CHECKS:
        fn, inputs = builder(np.random.default_rng(seed))
        err = grad_check(fn, inputs, step=step)
        results.append(CheckResult(name, err, tol, err <= tol))
    return results
