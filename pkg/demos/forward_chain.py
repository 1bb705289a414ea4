"""Forward chain basics: build a rate matrix, run it, check the law.

Simulates the forward jump process on the 3-dimensional hypercube with
Gillespie draws and compares the terminal histogram against the dense
matrix-exponential marginal.
"""

import numpy as np

from jdl import analysis, prm
from jdl.exact import build_propagator, propagate, tv_distance
from jdl.rng import make_rng

model = analysis.hypercube_model(3)
print(f"model: {model.name}, {model.n_states} states, horizon T={model.total_time}")
print(f"rate matrix constants: C={model.q.max_rate:g}, "
      f"max exit={model.q.max_exit_rate:g}, symmetric={model.q.symmetric}")

prop = build_propagator(model.q)
n_paths = 20_000
t = 0.5

batch = prm.simulate_ctmc_forward_batch(model.q, model.p0, t, n_paths, make_rng(1, 0))
emp = np.bincount(batch.terminal_states(), minlength=model.n_states) / n_paths
exact = propagate(prop, model.p0, t).probs

print(f"\nterminal law at t={t} over {n_paths} paths:")
print(f"{'state':>6} {'empirical':>10} {'exact':>10}")
for x in range(model.n_states):
    print(f"{x:>6} {emp[x]:>10.4f} {exact[x]:>10.4f}")
print(f"\nTV(empirical, exact) = {tv_distance(emp, exact):.4f}")
print(f"mean jumps per path  = {batch.jump_counts().mean():.2f} "
      f"(exit rate {model.q.max_exit_rate:g} x t={t} -> {model.q.max_exit_rate * t:g} expected)")
