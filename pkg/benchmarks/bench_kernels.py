"""Compare the compiled kernel backend against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 512,4096,65536] [--repeat 200]

Reports per-kernel timings for both backends plus the speedup, and verifies
on the way that the two backends agree bit for bit on the benchmark inputs.
"""

import argparse
import time

import numpy as np

from tinyqat.kernels import fallback

try:
    from tinyqat.kernels import _native
except ImportError:
    _native = None


def timeit(fn, repeat):
    fn()  # warm up
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def bench_size(n, repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(scale=1.5, size=n)
    s, q_n, q_p = 0.37, 8.0, 7.0
    idx = fallback.int_levels(x, s, q_n, q_p) + int(q_n)
    nbins = int(q_n + q_p + 1)
    cur = rng.integers(-8, 8, size=n)
    rows = []

    cases = [
        ("quantize_values", lambda impl: impl.quantize_values(x, s, q_n, q_p)),
        ("quantize_parts", lambda impl: impl.quantize_parts(x, s, q_n, q_p)),
        ("int_levels", lambda impl: impl.int_levels(x, s, q_n, q_p)),
        ("bin_moments", lambda impl: impl.bin_moments(idx, x, nbins)),
    ]
    for name, call in cases:
        t_np = timeit(lambda: call(fallback), repeat)
        if _native is not None:
            got_native = call(_native)
            got_np = call(fallback)
            if isinstance(got_np, tuple):
                for a, b in zip(got_native, got_np):
                    assert np.array_equal(np.asarray(a), np.asarray(b))
            else:
                assert np.array_equal(np.asarray(got_native), np.asarray(got_np))
            t_nat = timeit(lambda: call(_native), repeat)
        else:
            t_nat = float("nan")
        rows.append((name, n, t_np, t_nat))

    def osc(impl):
        state = (np.zeros(n, np.int64), np.zeros(n, np.int8), np.zeros(n))
        impl.oscillation_step(cur, *state, 0.01)

    t_np = timeit(lambda: osc(fallback), repeat)
    t_nat = timeit(lambda: osc(_native), repeat) if _native else float("nan")
    rows.append(("oscillation_step", n, t_np, t_nat))
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="512,4096,65536")
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    if _native is None:
        print("note: compiled backend not built; showing numpy fallback only")
    print(f"{'kernel':<18} {'n':>7} {'numpy':>12} {'native':>12} {'speedup':>8}")
    for n in (int(v) for v in args.sizes.split(",")):
        for name, size, t_np, t_nat in bench_size(n, args.repeat):
            speed = t_np / t_nat if t_nat == t_nat else float("nan")
            print(f"{name:<18} {size:>7} {t_np * 1e6:>10.1f}us "
                  f"{t_nat * 1e6:>10.1f}us {speed:>7.2f}x")


if __name__ == "__main__":
    main()
