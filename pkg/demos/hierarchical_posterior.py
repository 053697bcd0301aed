"""Sharing strength across cells with a hierarchical logit model.

Outcomes are observed for (refugee type, location) cells. Cells with little
data borrow from their row and column through additive random effects, so
their posterior means are pulled toward what similar cells show. The demo
fits the model by MCMC and compares the posterior mean with the raw success
rate in each cell.

Run:  python3 demos/hierarchical_posterior.py
"""
import numpy as np
from scipy.special import expit

from combi_bandit.posterior import (
    CellObservations,
    credible_interval,
    effective_sample_size,
    mcmc_sample_logit,
)

rng = np.random.default_rng(11)
n_u, n_v = 3, 4
row_effect = np.array([-0.6, 0.0, 0.6])
col_effect = np.array([-0.4, -0.1, 0.2, 0.5])
truth = expit(row_effect[:, None] + col_effect[None, :]).ravel()

# uneven data: some cells seen often, some almost never
n_obs = rng.choice([1, 3, 40], size=n_u * n_v, p=[0.3, 0.3, 0.4])
cells = np.repeat(np.arange(n_u * n_v), n_obs)
y = (rng.random(cells.size) < truth[cells]).astype(float)
obs = CellObservations(n_u, n_v, cells, y)

fit = mcmc_sample_logit(obs, n_draws=2000, rng=rng, warmup=2000)
post_mean = fit.cell_draws.mean(axis=0)
print(f"{'cell':>6} {'n':>4} {'raw rate':>9} {'posterior':>10} {'90% interval':>16} {'truth':>6}")
for c in range(n_u * n_v):
    raw = y[cells == c].mean()
    lo, hi = credible_interval(fit.cell_draws, c, 0.9)
    print(f"{c:>6} {n_obs[c]:>4} {raw:>9.2f} {post_mean[c]:>10.2f} [{lo:5.2f}, {hi:5.2f}]   {truth[c]:>6.2f}")

raw_err = np.mean([abs(y[cells == c].mean() - truth[c]) for c in range(n_u * n_v)])
print(f"\nmean abs error: raw rates {raw_err:.3f}, posterior means {np.abs(post_mean - truth).mean():.3f}")
print(f"effective sample size of cell 0: {effective_sample_size(fit.cell_draws[:, 0]):.0f} of 2000")
