"""Likelihood ratios between jump-process laws, checked three ways.

1. The exponential martingale has unit mean: E[Z_T] = 1.
2. Reweighting forward paths by Z reproduces expectations under the tilted
   chain simulated directly.
3. Along exact backward paths, the score-entropy integral of a perturbed
   score matches -log Z path by path in expectation.
"""

import math

import numpy as np

from jdl import analysis, prm
from jdl.exact import build_propagator, reversed_marginals
from jdl.rng import make_rng

model = analysis.two_state_model()
n_paths = 50_000

rep = analysis.girsanov_identity_check(model, n_paths=n_paths, seed=9)
print(f"{n_paths} forward paths on {model.name}, three intensity tilts:")
for point in rep.points:
    print(f"  tilt {int(point.param)}: mean Z = {point.extras['mean_Z']:.4f} "
          f"(z = {point.estimate:+.2f}), tilted-vs-reweighted z = "
          f"{point.extras['z_reweighting']:+.2f}")
print(f"path-entropy identity z = {rep.slopes['z_path_entropy_identity']:+.2f}")
if rep.violations:
    print("violations:", rep.violations)
else:
    print("all identities within 3 SE")

# the c = 1 case is exact, not statistical: both sides vanish per path
prop = build_propagator(model.q)
rev = reversed_marginals(prop, model.p0, model.total_time)
horizon = model.total_time - model.delta
back = prm.BackwardIntensity(model.q, rev)
batch = prm.simulate_backward_exact(model.q, rev, horizon, make_rng(9, 2), n_paths=2000)
ones = lambda ts, xs: np.ones((ts.size, model.n_states))
pse = prm.path_score_entropy(batch, back.rate_rows, ones)
logz = prm.log_likelihood_ratio(batch, back.rate_rows, ones)
print(f"\nc=1 sanity: max |entropy| = {np.abs(pse).max():g}, "
      f"max |log Z| = {np.abs(logz).max():g} (identically zero)")
