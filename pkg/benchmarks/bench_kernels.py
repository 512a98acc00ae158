#!/usr/bin/env python3
"""Benchmark: compiled data-factor sweep vs the pure-numpy fallback.

Times the hot kernel on the default experiment shape (K=8 users, T=10
slots, N=2 antennas, 4QAM) and on two larger shapes, then times one full decentralized
EP realization end to end with each backend.

Run: python benchmarks/bench_kernels.py
"""

import os
import time

import numpy as np

from cfep import kernels
from cfep.kernels import _numpy_kernel


def kernel_inputs(rng, K, T, N, S=4):
    points = np.exp(1j * np.pi * (2 * np.arange(S) + 1) / S)
    y = (rng.standard_normal((T, N)) + 1j * rng.standard_normal((T, N)))
    prec = rng.uniform(0.4, 3.0, (K, T, N))
    pm = (rng.standard_normal((K, T, N)) + 1j * rng.standard_normal((K, T, N))) * prec
    logx = np.log(rng.dirichlet(np.ones(S), size=(K, T)))
    return y, prec, pm, logx, points


def time_fn(fn, args, reps):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def bench_kernel():
    rng = np.random.default_rng(0)
    shapes = [(8, 10, 2), (8, 40, 2), (16, 20, 4)]
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'K x T x N':>12} {'numpy':>12} {'cython':>12} {'speedup':>9}")
    for K, T, N in shapes:
        args = kernel_inputs(rng, K, T, N) + (0.3, 1e-8, 1e-12, False)
        reps = max(3, int(0.3 / max(time_fn(_numpy_kernel.data_factor_sweep, args, 1), 1e-4)))
        t_np = time_fn(_numpy_kernel.data_factor_sweep, args, reps)
        if kernels.BACKEND == "cython":
            t_cy = time_fn(kernels.data_factor_sweep, args, reps * 4)
            print(f"{K:>4}x{T:<4}x{N:<2} {t_np * 1e3:>10.3f}ms {t_cy * 1e3:>10.3f}ms {t_np / t_cy:>8.1f}x")
        else:
            print(f"{K:>4}x{T:<4}x{N:<2} {t_np * 1e3:>10.3f}ms {'n/a':>12} {'n/a':>9}")


def bench_end_to_end():
    from cfep.harness import RunConfig, run_realization

    cfg = RunConfig.from_dict({})
    results = {}
    for backend in ("numpy", "active"):
        if backend == "numpy":
            engine_kernel = _numpy_kernel.data_factor_sweep
        else:
            engine_kernel = None  # whatever cfep.kernels selected at import
        from cfep import engine, kernels as kmod

        saved = kmod.data_factor_sweep
        if engine_kernel is not None:
            kmod.data_factor_sweep = engine_kernel
        try:
            rng = np.random.default_rng(np.random.SeedSequence([1, 0, 0]))
            t0 = time.perf_counter()
            run_realization(cfg, 10.0, rng, estimators=("proposed",))
            results[backend] = time.perf_counter() - t0
        finally:
            kmod.data_factor_sweep = saved
    label = f"active ({kernels.BACKEND})"
    print(f"\none full realization (16 APs, 10 iterations, proposed estimator):")
    print(f"  numpy fallback: {results['numpy']:.3f}s")
    print(f"  {label:<16}: {results['active']:.3f}s")


if __name__ == "__main__":
    bench_kernel()
    bench_end_to_end()
