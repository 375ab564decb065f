"""Compare the numba and numpy kernel sets on the learner's hot paths.

Usage: python benchmarks/bench_backends.py [--N 250,1000] [--k 3,10] [--repeat 200]

Prints per-call median times for each kernel plus a full ``observe`` step.
Both sets are called on identical inputs; the first call of each compiled
kernel is excluded so JIT time does not count.
"""
import argparse
import time

import numpy as np

from tilestream._kernels import NUMBA_KERNELS, NUMPY_KERNELS
from tilestream.model import Hyperparameters, init_model, precision_cholesky


def median_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def inputs(N, k, rng):
    mu = rng.standard_normal((N, k))
    G = rng.standard_normal((k, k))
    L = np.stack([precision_cholesky(G @ G.T / k + np.eye(k))] * N)
    A = rng.dirichlet(np.ones(N), size=N)
    return dict(
        mu=mu, L=L, A=A, a=np.log(A), x=rng.standard_normal(k),
        alpha=rng.dirichlet(np.ones(N)), logb=rng.normal(-5, 2, N),
        Nhat=rng.random((N, N)), S1=rng.standard_normal((N, k)),
        S2=np.stack([np.eye(k)] * N), nhat=rng.random(N) * 3,
        mu0=np.zeros((N, k)), lam=np.full(N, 1e-3), nu=np.full(N, 1e-3), Psi=np.eye(k),
    )


def kernel_cases(K, d):
    buf = np.empty_like(d["A"])
    return {
        "node_logpdf": lambda: K.node_logpdf(d["mu"], d["L"], d["x"]),
        "filter_accumulate": lambda: K.filter_accumulate(d["alpha"], d["A"], d["logb"],
                                                         d["Nhat"].copy(), 0.999),
        "accumulate_moments": lambda: K.accumulate_moments(d["S1"].copy(), d["S2"].copy(),
                                                           d["alpha"], d["x"], 0.999),
        "transition_adam": lambda: K.transition_adam(
            d["a"].copy(), d["Nhat"], 0.0, d["A"], np.zeros_like(d["A"]), np.zeros_like(d["A"]),
            1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001, buf),
        "node_gradients": lambda: K.node_gradients(d["mu"], d["L"], d["S1"], d["S2"], d["nhat"],
                                                   d["mu0"], d["lam"], d["nu"], d["Psi"]),
    }


def observe_ms(N, k, backend, repeat, rng):
    X = np.cumsum(rng.standard_normal((30 + repeat + 50, k)), axis=0) * 0.1
    m = init_model(X[:30], Hyperparameters(N=N, k=k), backend=backend)
    for x in X[30:80]:
        m.observe(x)
    times = []
    for x in X[80:]:
        t0 = time.perf_counter()
        m.observe(x)
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--N", default="250,1000")
    parser.add_argument("--k", default="3,10")
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    if NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'N':>5} {'k':>3}  {'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for N in (int(v) for v in args.N.split(",")):
        for k in (int(v) for v in args.k.split(",")):
            d = inputs(N, k, rng)
            slow, fast = kernel_cases(NUMPY_KERNELS, d), kernel_cases(NUMBA_KERNELS, d)
            rows = [(name, median_ms(slow[name], args.repeat), median_ms(fast[name], args.repeat))
                    for name in slow]
            rows.append(("observe (full step)", observe_ms(N, k, "numpy", args.repeat, rng),
                         observe_ms(N, k, "numba", args.repeat, rng)))
            for name, a, b in rows:
                print(f"{N:>5} {k:>3}  {name:<20} {a:>10.3f} {b:>10.3f} {a / b:>7.1f}x")


if __name__ == "__main__":
    main()
