"""Time one ELBO + gradient evaluation with each kernel backend.

    python benchmarks/bench_elbo.py --T 200 --repeats 5
"""
import argparse
import time

import numpy as np

from ssnn import kernels
from ssnn.generative import GenerativeParams
from ssnn.inference import InferenceParams


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, default in (("T", 200), ("K", 3), ("M", 10), ("m", 2), ("h", 8), ("e", 8), ("q", 8)):
        ap.add_argument(f"--{name}", type=int, default=default)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--relaxed", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    rng = np.random.default_rng(a.seed)
    theta = GenerativeParams.initialize(a.K, a.M, a.m, a.h, rng).view()
    phi = InferenceParams.initialize(a.K, a.M, a.m, a.e, a.q, rng).view()
    x = rng.normal(size=(a.T, a.m))
    noise = rng.gumbel(size=(a.T, a.K * a.M))

    results = {}
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    for b in backends:
        secs, res = best_of(lambda: kernels.elbo_and_grad(x, theta, phi, noise, 0.5, relaxed=a.relaxed, backend=b),
                            a.repeats)
        results[b] = res
        print(f"{b:<7} {secs * 1e3:9.2f} ms  ELBO {res.elbo:.10f}")
    if "cython" not in results:
        print("compiled kernel unavailable; only the fallback was timed")
        return
    py, cy = results["python"], results["cython"]
    diff = max(np.abs(py.grad_theta[k] - cy.grad_theta[k]).max() for k in py.grad_theta)
    diff = max(diff, max(np.abs(py.grad_phi[k] - cy.grad_phi[k]).max() for k in py.grad_phi))
    print(f"max |gradient difference| {diff:.2e}, ELBO difference {abs(py.elbo - cy.elbo):.2e}")


if __name__ == "__main__":
    main()
