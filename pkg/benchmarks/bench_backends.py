#!/usr/bin/env python3
"""Race the numba kernels against the pure-numpy fallback.

Runs every hot kernel on matched inputs, checks the two backends agree,
and reports per-call wall time. The numba path pays its JIT cost in an
untimed warmup pass.

    python benchmarks/bench_backends.py --resolution 32 --repeats 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from voxcomplete.backend import HAVE_NUMBA
from voxcomplete.kernels import numpy_impl


def _time(fn, args, repeats):
    fn(*args)  # warmup (and JIT compile for numba)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(n, rng):
    cin, cout, k = 8, 16, 3
    x = rng.standard_normal((cin, n, n, n))
    w = rng.standard_normal((cout, cin, k, k, k)) * 0.1
    b = rng.standard_normal(cout) * 0.1
    dy = rng.standard_normal((cout, n // 2, n // 2, n // 2))
    wd = rng.standard_normal((cin, cout, 4, 4, 4)) * 0.1
    dyd = rng.standard_normal((cout, 2 * n, 2 * n, 2 * n))
    a = rng.random((600, 3))
    bpts = rng.random((800, 3))
    occ = (rng.random((n, n, n)) < 0.3).astype(np.uint8)
    ray = np.array([0.3, -0.8, 0.51])
    return [
        ("conv3d", (x, w, b, 2, 1)),
        ("conv3d_grads", (x, w, dy, 2, 1)),
        ("deconv3d", (x, wd, b, 2, 1)),
        ("deconv3d_grads", (x, wd, dyd, 2, 1)),
        ("min_dists", (a, bpts)),
        ("visible_mask", (occ, ray)),
    ]


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    from voxcomplete.kernels import numba_impl

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<16} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}  match")
    for name, call_args in _cases(args.resolution, rng):
        f_np = getattr(numpy_impl, name)
        f_nb = getattr(numba_impl, name)
        ok = _agree(f_np(*call_args), f_nb(*call_args))
        t_np = _time(f_np, call_args, args.repeats)
        t_nb = _time(f_nb, call_args, args.repeats)
        print(f"{name:<16} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} "
              f"{t_np / t_nb:>8.1f}x  {'yes' if ok else 'NO'}")
        if not ok:
            raise SystemExit(f"backend mismatch in {name}")


if __name__ == "__main__":
    main()
