"""Time the compiled convolution kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from dircn import _kernels

SHAPES = (
    # (n, c_in, c_out, hw, k, stride, padding, groups)
    (2, 8, 8, 64, 3, 1, 1, 1),
    (2, 16, 16, 32, 3, 1, 1, 4),
    (2, 8, 16, 64, 3, 2, 1, 1),
    (4, 2, 8, 64, 3, 1, 1, 1),
)

REPEATS = 5


def _time(fn, *args, **kwargs) -> float:
    fn(*args, **kwargs)  # warm-up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(n, c_in, c_out, hw, k, stride, padding, groups, rng) -> dict:
    x = rng.standard_normal((n, c_in, hw, hw))
    w = rng.standard_normal((c_out, c_in // groups, k, k))
    out = _kernels.conv2d_forward(x, w, stride=stride, padding=padding, groups=groups)
    times = {}
    for backend in ("numba", "numpy"):
        if backend == "numba" and not _kernels.HAS_NUMBA:
            continue
        _kernels.set_backend(backend)
        times[backend] = {
            "forward": _time(_kernels.conv2d_forward, x, w, stride=stride,
                             padding=padding, groups=groups),
            "grad_input": _time(_kernels.conv2d_grad_input, out, w, (hw, hw),
                                stride=stride, padding=padding, groups=groups),
            "grad_weight": _time(_kernels.conv2d_grad_weight, out, x, w.shape,
                                 stride=stride, padding=padding, groups=groups),
        }
    return times


def main() -> None:
    rng = np.random.default_rng(0)
    print(f"numba available: {_kernels.HAS_NUMBA}")
    header = f"{'case':28s} {'kernel':12s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for case in SHAPES:
        n, c_in, c_out, hw, k, stride, padding, groups = case
        label = f"n{n} c{c_in}->{c_out} {hw}x{hw} k{k} s{stride} g{groups}"
        times = bench_case(*case, rng)
        for kernel in ("forward", "grad_input", "grad_weight"):
            nb = times.get("numba", {}).get(kernel)
            np_t = times["numpy"][kernel]
            nb_text = f"{nb * 1e3:9.2f}m" if nb is not None else "       n/a"
            ratio = f"{np_t / nb:7.1f}x" if nb else "     n/a"
            print(f"{label:28s} {kernel:12s} {nb_text} {np_t * 1e3:9.2f}m {ratio}")
    _kernels.set_backend("auto")


if __name__ == "__main__":
    main()
