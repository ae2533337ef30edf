"""Compare the compiled and NumPy replication kernels.

Usage: python3 benchmarks/bench_kernels.py [--reps R] [--n N] [--kz K] [--repeat M]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from weakiv import _kernels_py
from weakiv.simulation import Design, SimulationConfig, _draw, config_pi, replication_rng

try:
    from weakiv import _kernels as _compiled
except ImportError:
    _compiled = None


def make_batch(reps: int, n: int, kz: int, seed: int = 0):
    cfg = SimulationConfig(Design("design1", 0.5), n=n, k_z=kz, rho=0.95, mu2=4, replications=reps, seed=seed)
    pi = config_pi(cfg)
    Z = np.empty((reps, n, kz))
    x = np.empty((reps, n))
    y = np.empty((reps, n))
    for i in range(reps):
        Z[i], x[i], y[i] = _draw(cfg, pi, replication_rng(seed, i))
    return Z, x, y


def best_time(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=20000)
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--kz", type=int, default=2)
    p.add_argument("--repeat", type=int, default=3)
    a = p.parse_args()
    Z, x, y = make_batch(a.reps, a.n, a.kz)
    args = (Z, x, y, True)
    t_py = best_time(_kernels_py.replicate_stats, args, a.repeat)
    print(f"R={a.reps} n={a.n} k_z={a.kz}")
    print(f"numpy   {t_py:8.3f} s")
    if _compiled is None:
        print("cython  not built")
        return
    t_c = best_time(_compiled.replicate_stats, args, a.repeat)
    ref = _kernels_py.replicate_stats(*args)
    # scaled difference: weak-instrument LIML draws can be huge and ill-conditioned
    diff = np.nanmax(np.abs(_compiled.replicate_stats(*args) - ref) / np.maximum(1.0, np.abs(ref)))
    print(f"cython  {t_c:8.3f} s  ({t_py / t_c:.1f}x faster)")
    print(f"max scaled difference {diff:.2e}")


if __name__ == "__main__":
    main()
