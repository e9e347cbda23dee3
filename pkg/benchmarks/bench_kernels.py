"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (numba compiles on first call), checked for
agreement with the numpy version and then timed as the best of ``repeat``
runs.
"""

import argparse
import time

import numpy as np

from tscopula import _kernels


def make_cases(rng):
    d, n_layers, hidden = 20, 2, 8
    a = np.exp(rng.normal(size=(d, n_layers, hidden)))
    b = rng.normal(size=(d, n_layers, hidden))
    w = rng.normal(size=(d, n_layers, hidden))
    logw = w - np.logaddexp.reduce(w, axis=-1, keepdims=True)
    x = rng.normal(size=(2000, d))
    u = rng.uniform(0.01, 0.99, size=(200, d))
    return {
        "dsf_cdf": (a, b, logw, x),
        "dsf_inverse": (a, b, logw, u),
        "crps_rows": (rng.normal(size=(50, 1000)), rng.normal(size=50)),
        "energy_score": (rng.normal(size=(500, 30)), rng.normal(size=30)),
        "newey_west_var": (rng.normal(size=100_000), 3),
        "clayton_logpdf": (9.75, rng.uniform(size=200_000), rng.uniform(size=200_000)),
        "clayton_conditional_inverse": (-0.5, rng.uniform(size=200_000), rng.uniform(size=200_000)),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = make_cases(np.random.default_rng(0))
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, case in cases.items():
        np_fn, nb_fn = _kernels.NUMPY_KERNELS[name], _kernels.NUMBA_KERNELS[name]
        ref, got = np_fn(*case), nb_fn(*case)  # warm-up and compile
        np.testing.assert_allclose(got, ref, rtol=1e-7, atol=1e-9)
        t_np = best_of(np_fn, case, args.repeat)
        t_nb = best_of(nb_fn, case, args.repeat)
        print(f"{name:<30}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
