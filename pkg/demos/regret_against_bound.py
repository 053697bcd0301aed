"""How fast does Thompson sampling learn which options to pick?

We pick 3 of 9 options every period, observe a success or failure on each
pick, and measure expected regret: the gap between the best possible
action and the chosen one, evaluated at the true success rates. The
average cumulative regret over many replications is printed next to the
worst-case Bayesian guarantee sqrt(d t m (log(d/m) + 1) / 2).

Run:  python3 demos/regret_against_bound.py
"""
import numpy as np

from combi_bandit.engine import simulate_beta_bernoulli_regret
from combi_bandit.metrics import theorem1_bound
from combi_bandit.solvers import TopM

d, m, T, reps = 9, 3, 400, 300
rng = np.random.default_rng(2024)
true_rates = rng.uniform(0.2, 0.8, d)
print("true success rates:", np.round(true_rates, 2))

regret = simulate_beta_bernoulli_regret(true_rates, TopM(d, m), T, reps, rng)
mean_cum = regret.mean(axis=0).cumsum()

print(f"\n{'t':>5} {'mean cumulative regret':>24} {'guarantee':>10}")
for t in (1, 10, 50, 100, 200, 400):
    print(f"{t:>5} {mean_cum[t - 1]:>24.3f} {theorem1_bound(d, m, t):>10.3f}")

# regret per period shrinks as the posterior concentrates
early, late = regret[:, :50].mean(), regret[:, -50:].mean()
print(f"\naverage regret per period: first 50 = {early:.3f}, last 50 = {late:.4f}")
