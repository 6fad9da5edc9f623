"""Simulate one dataset, fit the joint model, and print the estimated
marginal trajectory next to the generating one.

    python demos/fit_and_trajectory.py [--n 200] [--pi 0.2] [--seed 1]
"""

import argparse

import numpy as np

from cpcure import FitConfig, SimConfig, fit, generate_dataset
from cpcure.inference import DesignMeans, marginal_trajectory
from cpcure.simulation import generative_trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--pi", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    cfg = SimConfig.scenario(n=args.n, stable_rate=args.pi)
    sim = generate_dataset(cfg, np.random.default_rng(args.seed))
    res = fit(sim.dataset, FitConfig(seed=args.seed))
    print(f"converged={res.converged} after {res.iterations_used} iterations")
    est, true = res.params.named_values(), cfg.truth.named_values()
    for name in ("stable_rate", "re_mean[omega]", "re_mean[b0]", "re_mean[b1]", "re_mean[b2]"):
        print(f"  {name:<16} estimate {est[name]: .3f}   truth {true[name]: .3f}")

    grid = np.array([0.25, 0.5, 1.0, 1.5, 2.0])
    tr = marginal_trajectory(res.params, DesignMeans.of(sim.dataset), grid, 50_000, np.random.default_rng(0))
    ref, _ = generative_trajectory(cfg.truth, grid, 50_000, np.random.default_rng(1), sample_covariates=False)
    print("\n  time   fitted   generating")
    for t, a, b in zip(grid, tr.mean, ref):
        print(f"  {t:4.2f}  {a: .3f}   {b: .3f}")


if __name__ == "__main__":
    main()
