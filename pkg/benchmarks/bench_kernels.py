"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--chains 10000] [--repeat 5] [--csv out.csv]

Times each hot kernel on both backends, then one full composed sampling run
(two-Gaussian default bundle, T=1000 ancestral) per backend.
"""

from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from unite_sampler import kernels
from unite_sampler.config import DEFAULT_CONFIG, from_dict
from unite_sampler.sampler import SamplerConfig, sample


def kernel_cases(m, rng):
    z = rng.normal(size=(m, 2))
    eps = rng.normal(size=(m, 2))
    mu, sigma = np.array([1.0, -0.5]), np.array([0.8, 1.2])
    w = np.array([0.2, 0.5, 0.3])
    means = rng.normal(size=(3, 2))
    stds = rng.uniform(0.3, 1.0, (3, 2))
    terms = rng.normal(size=(4, m, 2))
    coefs = np.array([0.1, 0.2, 0.3, 0.4])
    return {
        "gaussian_epsilon": lambda k: k.gaussian_epsilon(z, mu, sigma, 0.4),
        "gmm_epsilon": lambda k: k.gmm_epsilon(z, w, means, stds, 0.4),
        "ddpm_step": lambda k: k.ddpm_step(z, eps, 0.01, 0.4, 0.1, eps),
        "ddim_step": lambda k: k.ddim_step(z, eps, 0.4, 0.5),
        "weighted_sum": lambda k: k.weighted_sum(terms, coefs),
        "compose_combine": lambda k: k.compose_combine(terms, coefs + 1.0, eps, float(coefs.sum())),
    }


def best_time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def run(chains=10_000, repeat=5, kernel_rows=10_000, backends=None):
    """Returns a list of ``(case, backend, seconds)`` rows."""
    backends = backends or kernels.available_backends()
    rng = np.random.default_rng(0)
    rows = []
    for name, case in kernel_cases(kernel_rows, rng).items():
        for b in backends:
            mod = kernels.get_backend(b)
            rows.append((name, b, best_time(lambda: case(mod), repeat, 20)))
    rc = from_dict(DEFAULT_CONFIG)
    bundle, spec, sched = rc.bundle, rc.composition(), rc.schedule
    for b in backends:
        previous = kernels.use_backend(b)
        try:
            secs = best_time(lambda: sample(bundle, spec, sched, SamplerConfig(seed=0), chains), max(1, repeat // 2), 1)
        finally:
            kernels.use_backend(previous)
        rows.append((f"sample[{chains} chains, T={sched.T}]", b, secs))
    return rows


def format_table(rows):
    cases = list(dict.fromkeys(r[0] for r in rows))
    backends = list(dict.fromkeys(r[1] for r in rows))
    t = {(c, b): s for c, b, s in rows}
    lines = [f"{'case':<36}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + ("    speedup" if len(backends) > 1 else "")]
    for c in cases:
        line = f"{c:<36}" + "".join(f"{1e3 * t[c, b]:>16.3f}" for b in backends)
        if "cython" in backends and "python" in backends:
            line += f"    {t[c, 'python'] / t[c, 'cython']:>6.2f}x"
        lines.append(line)
    return "\n".join(lines)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--chains", type=int, default=10_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--rows", type=int, default=10_000, help="batch rows for the per-kernel timings")
    p.add_argument("--csv", help="also write the raw timings here")
    args = p.parse_args(argv)
    if "cython" not in kernels.available_backends():
        print("note: compiled backend not built; timing the numpy fallback only", file=sys.stderr)
    rows = run(args.chains, args.repeat, args.rows)
    print(format_table(rows))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "backend", "seconds"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
