#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--sizes 64x192 768x900 ...] [--repeat 5]
"""

import argparse
import time

import numpy as np

from geossl import _accel


def median_time(fn, *args, repeat=5, **kw):
    fn(*args, **kw)  # warm-up (and JIT compile on the first numba call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args, **kw)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def inputs(h, w, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.random((h, w))
    observed = rng.random((h, w)) > 0.1
    return values, observed


def bench(h, w, repeat):
    values, observed = inputs(h, w)
    pred = values > 0.5
    truth = np.roll(pred, 1, axis=1)
    cases = {
        "line_fill": (_accel.line_fill, (values, observed, 5)),
        "block_sums": (_accel.block_sums, (values, observed, 8, 8) if h % 8 == 0 and w % 8 == 0
                       else (values, observed, 4, 4)),
        "confusion_counts": (_accel.confusion_counts, (pred, truth, observed)),
    }
    rows = []
    for name, (fn, args) in cases.items():
        t_np = median_time(fn, *args, repeat=repeat, use_numba=False)
        t_nb = median_time(fn, *args, repeat=repeat, use_numba=True) if _accel.HAVE_NUMBA else float("nan")
        rows.append((name, f"{h}x{w}", t_np, t_nb))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", nargs="+", default=["64x192", "480x1440", "768x900"])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"backend available: {_accel.backend()}")
    print(f"{'kernel':<18}{'size':>10}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for s in args.sizes:
        h, w = (int(x) for x in s.split("x"))
        for name, size, t_np, t_nb in bench(h, w, args.repeat):
            print(f"{name:<18}{size:>10}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
