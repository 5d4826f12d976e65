"""Closed-form Gaussian rollouts next to a sampled ground truth.

For each kinematic formulation we draw one random case, roll its Gaussian
moments forward analytically and compare every step against a Monte Carlo
simulation of the same stochastic controls. The exact forms (f1, f2) should
agree to sampling noise; the linearized forms (f3, f4) within the
accumulated linearization bound.

Run: python demos/propagation_vs_monte_carlo.py [n_samples]
"""

import sys

from kinprior.oracle import compare_with_mc, random_case
from kinprior.propagation import rollout_error_bounds

n_samples = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
steps = 20

for form in ("f1", "f2", "f3", "f4"):
    initial, controls, profile = random_case(form, seed=3, T=steps)
    checks = compare_with_mc(initial, controls, profile, steps, n_samples, seed=11)
    bounds = rollout_error_bounds(initial, controls, profile, steps, "quadrature")
    last = checks[-1]
    print(f"{form}: step {last.step}")
    print(f"  analytic  mu=({last.analytic_mean[0]:8.3f}, {last.analytic_mean[1]:8.3f})"
          f"  sigma=({last.analytic_sigma[0]:.4f}, {last.analytic_sigma[1]:.4f})")
    print(f"  sampled   mu=({last.mc_mean[0]:8.3f}, {last.mc_mean[1]:8.3f})"
          f"  sigma=({last.mc_sigma[0]:.4f}, {last.mc_sigma[1]:.4f})")
    print(f"  linearization bound on the mean {bounds[-1].mean:.2e} m;"
          f" all {len(checks)} steps within tolerance: {all(c.passed for c in checks)}")
