"""Thompson sampling for combinatorial allocation with semi-bandit feedback.

Submodules
----------
domain     actions, outcomes, histories and option type structure
solvers    exact argmax over top-m, assignment, capacitated and knapsack sets
posterior  Beta-Bernoulli updates and MCMC for hierarchical outcome models
engine     the Thompson loop, environments and the resettlement simulation
metrics    information measures, regret bounds and exact inequality checks
inference  randomization tests on adaptively collected histories
cli        command-line interface
"""

__version__ = "0.1.0"

from .domain import History, TypeStructure, reward  # noqa: E402
from .solvers import (  # noqa: E402
    Assignment,
    Capacitated,
    Explicit,
    MultipleKnapsack,
    TopM,
    brute_force_argmax,
    solve,
)
from .posterior import (  # noqa: E402
    BetaBernoulliModel,
    HierarchicalModel,
    HierarchicalPrior,
    mcmc_sample_beta_binomial,
    mcmc_sample_gaussian,
    mcmc_sample_logit,
)
from .engine import (  # noqa: E402
    Environment,
    generate_synthetic_scenario,
    oracle_action,
    run_episode,
    run_resettlement,
    thompson_step,
)
from .metrics import per_capita_bound, theorem1_bound, verify_lemma_properties  # noqa: E402
from .inference import NullSpec, randomization_test  # noqa: E402

__all__ = [
    "__version__",
    "History",
    "TypeStructure",
    "reward",
    "TopM",
    "Assignment",
    "Capacitated",
    "MultipleKnapsack",
    "Explicit",
    "solve",
    "brute_force_argmax",
    "BetaBernoulliModel",
    "HierarchicalModel",
    "HierarchicalPrior",
    "mcmc_sample_gaussian",
    "mcmc_sample_logit",
    "mcmc_sample_beta_binomial",
    "Environment",
    "thompson_step",
    "oracle_action",
    "run_episode",
    "run_resettlement",
    "generate_synthetic_scenario",
    "theorem1_bound",
    "per_capita_bound",
    "verify_lemma_properties",
    "NullSpec",
    "randomization_test",
]
