"""Minimize the Rosenbrock valley with a dense learned preconditioner.

The curvature along the valley floor is three orders of magnitude flatter
than across it, which stalls plain gradient steps. A dense preconditioner
learned online from Hessian-vector probes bends the steps to the valley
geometry; with preconditioned gradient clipping taming the first wild steps,
the global minimum at (1, 1) is reached in roughly two hundred iterations.
"""

import numpy as np

from psgdkit import ProbeConfig, RunConfig, make_rosenbrock, run

problem = make_rosenbrock()
config = RunConfig(
    method="psgd",
    precond_variant="dense",
    mu=0.5,
    precond_mu=0.1,
    clip_omega=1.0,
    probe=ProbeConfig(mode="exact"),
    iters=500,
    seed=0,
)

result = run(problem, config)
losses = [row.train_loss for row in result.rows]
first_hit = next((row.iter for row in result.rows if row.train_loss < 1e-8), None)

x0, y0 = problem.initial_theta(0)
print(f"start      f({x0:g}, {y0:g}) = {losses[0]:.4f}")
for mark in (50, 100, 200, 300, 500):
    print(f"iter {mark:4d}   loss {losses[mark - 1]:.3e}")
print(f"\nreached f < 1e-8 at iteration {first_hit}")
print(f"final point {np.round(result.theta, 6)} (global minimum is [1, 1])")
