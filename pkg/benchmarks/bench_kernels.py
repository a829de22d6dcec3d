"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from pesmoc import _fallback

try:
    from pesmoc import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    n = 20_000
    mc = rng.normal(0, 2, (n, 2))
    vc = rng.uniform(1e-3, 3, (n, 2))
    md = rng.normal(0, 2, (n, 2))
    vd = rng.uniform(1e-3, 3, (n, 2))
    m = rng.normal(0, 2, n)
    v = rng.uniform(1e-3, 3, n)
    Y = rng.normal(size=(2000, 2))
    P = rng.uniform(0, 1, (500, 2))
    ref = np.array([1.0, 1.0])
    return {
        "phi_derivatives (20k)": lambda impl: impl.phi_derivatives(m, v),
        "omega_derivatives (20k x C2 K2)": lambda impl: impl.omega_derivatives(mc, vc, md, vd),
        "nondominated_mask (2000 x 2)": lambda impl: impl.nondominated_mask(Y),
        "hypervolume_2d (500)": lambda impl: impl.hypervolume_2d(P, ref),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = {"python": _fallback}
    if _kernels is not None:
        impls["cython"] = _kernels
    print(f"{'kernel':34s}" + "".join(f"{k:>12s}" for k in impls) + ("   speedup" if len(impls) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for key, impl in impls.items():
            t = timeit.Timer(lambda: fn(impl))
            loops, _ = t.autorange()
            times[key] = min(t.repeat(args.repeat, loops)) / loops
        row = f"{name:34s}" + "".join(f"{times[k] * 1e3:10.3f}ms" for k in impls)
        if len(impls) == 2:
            row += f"{times['python'] / times['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
