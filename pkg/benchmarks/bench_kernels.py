"""Compare the compiled GLM kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 20000] [--p 6] [--repeat 20]

Reports the best wall time per call for each backend and the maximum
absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from fedcausal import _kernels_py as py
from fedcausal.kernels import BACKEND, GAUSSIAN, LOGIT

try:
    from fedcausal import _kernels as cy
except ImportError:  # pragma: no cover
    cy = None


def make_problem(n, p, seed=0):
    rng = np.random.default_rng(seed)
    X = np.ascontiguousarray(np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]))
    beta = rng.normal(scale=0.3, size=p)
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    weights = rng.uniform(0.5, 2.0, size=n)
    return X, y, beta, weights


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--p", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    X, y, beta, weights = make_problem(args.n, args.p)
    print(f"active backend: {BACKEND}; n={args.n}, p={args.p}")
    if cy is None:
        print("compiled extension not built; nothing to compare")
        return
    cases = {
        "loglik/logit": lambda m: m.glm_loglik(X, y, beta, weights, LOGIT, 1.0),
        "derivatives/logit": lambda m: m.glm_derivatives(X, y, beta, weights, LOGIT, 1.0),
        "derivatives/gaussian": lambda m: m.glm_derivatives(X, y, beta, weights, GAUSSIAN, 1.0),
        "weighted_crossprod": lambda m: m.weighted_crossprod(X, X, weights),
    }
    print(f"{'kernel':>22s}  {'cython ms':>10s}  {'python ms':>10s}  {'speedup':>8s}  {'max |diff|':>10s}")
    for name, call in cases.items():
        t_cy = best(lambda: call(cy), args.repeat)
        t_py = best(lambda: call(py), args.repeat)
        out_cy, out_py = call(cy), call(py)
        if not isinstance(out_cy, tuple):
            out_cy, out_py = (out_cy,), (out_py,)
        diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
                   for a, b in zip(out_cy, out_py))
        print(f"{name:>22s}  {1e3 * t_cy:10.3f}  {1e3 * t_py:10.3f}  {t_py / t_cy:8.2f}  {diff:10.2e}")


if __name__ == "__main__":
    main()
