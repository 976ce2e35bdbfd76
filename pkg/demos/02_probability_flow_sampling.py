"""Forward noising and reverse probability-flow sampling with exact scores.

The forward SDE pushes a two-component Gaussian mixture toward noise; because
the drift is linear the perturbed density stays a mixture, so its score is
available in closed form. The reverse probability-flow ODE driven by that
score regenerates the data distribution, and the SDE/ODE marginals agree at
every intermediate time.
"""

import numpy as np

from nrdm import (OuSchedule, ScoreOracle, analytic_score, eval_generated,
                  make_rng, sample_reverse, sde_vs_pfode_marginal_check,
                  sliced_wasserstein)

oracle = ScoreOracle(np.array([0.5, 0.5]), np.array([[-1.5, 0.0], [1.5, 0.0]]),
                     np.array([0.3, 0.3]))
schedule = OuSchedule(rate=6.0)  # strongly mixing: t=1 marginal ~ N(0, I)

# ------------------------------------------------------------------
# The score is the gradient of the log-density. At the midpoint between the
# two modes it vanishes by symmetry.

print("score at the saddle:", analytic_score(oracle, [[0.0, 0.0]]).tolist())
print("score in the right mode:", analytic_score(oracle, [[1.5, 0.0]]).tolist())

# ------------------------------------------------------------------
# SDE vs PF-ODE: same marginals. The check runs both from identical initial
# samples and reports the worst mean / covariance gap per time.

report = sde_vs_pfode_marginal_check(oracle, OuSchedule(), 4000,
                                     np.linspace(0.05, 1.0, 10), seed=0)
print(f"\nmax |mean gap| = {report.max_mean:.4f}   max |cov gap| = {report.max_cov:.4f}")

# ------------------------------------------------------------------
# Sampling: integrate the PF-ODE backward from terminal noise using the
# analytic score. This is the quality ceiling any trained model chases.

samples = sample_reverse(oracle, schedule, 4000, 2, "heun", 100, seed=1)
fresh, _ = oracle.sample(4000, make_rng(2))
print(f"\noracle sampler sliced-W1 vs fresh data: "
      f"{sliced_wasserstein(samples, fresh, seed=3):.4f}")
print(f"sample mean: {np.round(samples.mean(axis=0), 3).tolist()}, "
      f"mode balance: {np.mean(samples[:, 0] > 0):.3f}")

rep = eval_generated(oracle, schedule, oracle, 4000, "heun", 100, seed=4)
print("full metric report:", {k: round(v, 4) if isinstance(v, float) else v
                              for k, v in rep.row().items()})
