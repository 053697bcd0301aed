"""Does the choice of option matter? A randomization test on adaptive data.

Thompson sampling chooses options adaptively, so the usual two-sample tests
do not apply. Instead, the algorithm is re-run on counterfactual histories
in which outcomes are reshuffled as the null hypothesis allows, and the
observed statistic is ranked among the recomputed ones.

Two data sets: one where all options are equally good (the test should
rarely reject) and one where options 1 and 2 are clearly better.

Run:  python3 demos/randomization_inference.py
"""
import numpy as np

from combi_bandit.domain import TypeStructure
from combi_bandit.engine import Environment, run_episode
from combi_bandit.inference import NullSpec, mean_difference, randomization_test
from combi_bandit.posterior import BetaBernoulliModel
from combi_bandit.solvers import TopM

fs = TopM(4, 2)
ts = TypeStructure.identity(4)
statistic = mean_difference([0, 1], [2, 3])  # options 1,2 versus options 3,4

for label, rates in (("equal rates", [0.5, 0.5, 0.5, 0.5]), ("options 1,2 better", [0.75, 0.7, 0.4, 0.35])):
    rng = np.random.default_rng(5)
    history = run_episode(Environment(np.array(rates)), BetaBernoulliModel(ts), fs, 40, rng).history
    result = randomization_test(history, NullSpec("global"), statistic, 199, rng,
                                BetaBernoulliModel(ts), fs, workers=1)
    print(f"{label:>20}: observed difference {result.statistic_observed:+.3f}, "
          f"p-value {result.p_value:.3f}")
