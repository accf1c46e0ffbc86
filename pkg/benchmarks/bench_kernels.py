"""Compare the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Checks that both backends agree, then prints the median wall time of each
kernel per backend and the speedup of the compiled one.
"""
import argparse
import statistics
import time

import numpy as np

from pcp import _kernels_py as py

try:
    from pcp import _kernels as cy
except ImportError:
    cy = None


def cases(rng):
    x = rng.standard_normal((64, 16, 8, 8))
    cols = py.im2col(x, 3, 3, 1, 1)
    Z = rng.standard_normal((2000, 32))
    gram = Z.T @ Z
    corr = Z.T @ (Z @ rng.standard_normal(32) + rng.standard_normal(2000))
    lam = 0.05 * float(np.abs(2 * corr).max())
    frozen = np.zeros(32, np.uint8)
    beta0 = np.zeros(32)
    return {
        "im2col (64x16x8x8, 3x3)": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im (64x16x8x8, 3x3)": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1),
        "lasso_cd_gram (32 channels)": lambda k: k.lasso_cd_gram(gram, corr, lam, frozen, beta0)[0],
    }


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    if cy is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, run in cases(np.random.default_rng(0)).items():
        t_py = timed(lambda: run(py), args.repeat)
        if cy is None:
            print(f"{name:32s} {t_py * 1e3:10.3f} {'-':>10s} {'-':>8s}")
            continue
        a, b = np.asarray(run(py)), np.asarray(run(cy))
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree (max diff {np.abs(a - b).max():.3e})")
        t_cy = timed(lambda: run(cy), args.repeat)
        print(f"{name:32s} {t_py * 1e3:10.3f} {t_cy * 1e3:10.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
