"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (and JIT-compile), then timed
``--repeat`` times; the best time is reported together with the largest
absolute difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from mcgdiff import _accel, kernels


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def projector_case(side, views):
    angles = np.linspace(0.0, np.pi, views, endpoint=False)
    n_det = int(np.ceil(side * np.sqrt(2))) + 1

    def run():
        return kernels.projection_triplets(side, angles, n_det)

    def digest(out):
        rows, cols, vals = out
        order = np.lexsort((cols, rows))
        return vals[order]

    return f"radon triplets {side}px x {views} views", run, digest


def mixture_case(n_query, n_data, dim):
    rng = np.random.default_rng(0)
    X, data, V = rng.standard_normal((n_query, dim)), rng.standard_normal((n_data, dim)), rng.standard_normal((n_query, dim))

    def run():
        return kernels.mixture_posterior(X, data, 0.8, 0.5, V)

    def digest(out):
        return np.concatenate([out[0].ravel(), out[1].ravel()])

    return f"mixture posterior {n_query}q x {n_data}k x {dim}d", run, digest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    cases = [projector_case(64, 30), projector_case(128, 60), mixture_case(8, 200, 4096), mixture_case(256, 500, 64)]
    print(f"{'kernel':<40} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'max |diff|':>11}")
    previous = _accel.backend()
    try:
        for name, run, digest in cases:
            timings, outputs = {}, {}
            for be in ("numpy", "numba"):
                _accel.set_backend(be)
                timings[be] = best_time(run, args.repeat)
                outputs[be] = digest(run())
            diff = float(np.max(np.abs(outputs["numpy"] - outputs["numba"])))
            print(f"{name:<40} {timings['numpy'] * 1e3:>11.2f} {timings['numba'] * 1e3:>11.2f} "
                  f"{timings['numpy'] / timings['numba']:>7.1f}x {diff:>11.1e}")
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
