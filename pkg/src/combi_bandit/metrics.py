"""Information measures, regret bounds and exact checks of the inequalities behind them.

All logarithms are natural.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .solvers import FeasibleSet, TopM, Assignment, _enumerate_array, lex_key

__all__ = [
    "bernoulli_entropy",
    "bernoulli_kl",
    "entropy",
    "mutual_information",
    "conditional_entropy",
    "theorem1_bound",
    "per_capita_bound",
    "entropy_bound_terms",
    "bound_curve",
    "bound_curve_csv",
    "cumulative_regret",
    "DiscreteBandit",
    "LemmaReport",
    "verify_lemma_properties",
    "packaged_instances",
]


def _xlogy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x == 0.0, 0.0, x * np.log(y))
    return out


def bernoulli_entropy(p):
    """``-[p log p + (1-p) log(1-p)]`` with ``0 log 0 = 0``."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0.0) | (p_arr > 1.0)) or np.any(np.isnan(p_arr)):
        raise ValueError("p must lie in [0, 1]")
    h = -(_xlogy(p_arr, p_arr) + _xlogy(1.0 - p_arr, 1.0 - p_arr))
    return float(h) if h.ndim == 0 else h


def bernoulli_kl(p, q):
    """KL divergence between Bernoulli(p) and Bernoulli(q).

    Returns ``inf`` when ``q`` is 0 or 1 and ``p`` differs from it.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr > 1)) or np.any((q_arr < 0) | (q_arr > 1)):
        raise ValueError("p and q must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p_arr == 0.0, 0.0, p_arr * np.log(p_arr / q_arr))
        b = np.where(p_arr == 1.0, 0.0, (1.0 - p_arr) * np.log((1.0 - p_arr) / (1.0 - q_arr)))
    kl = np.where(np.isnan(a + b), np.inf, a + b)
    # rounding can push a true zero slightly negative
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def entropy(pmf) -> float:
    p = np.asarray(pmf, dtype=np.float64).ravel()
    return float(-_xlogy(p, p).sum())


def _check_joint(joint) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("joint pmf must be a matrix")
    if np.any(p < 0) or np.any(~np.isfinite(p)):
        raise ValueError("joint pmf entries must be nonnegative and finite")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"joint pmf sums to {p.sum()!r}, not 1")
    return p


def mutual_information(joint) -> float:
    """``I(X; Y)`` for a joint pmf with X on rows and Y on columns."""
    p = _check_joint(joint)
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / (px * py)), 0.0)
    return max(float(terms.sum()), 0.0)


def conditional_entropy(joint) -> float:
    """``H(X | Y)`` for a joint pmf with X on rows and Y on columns."""
    p = _check_joint(joint)
    py = p.sum(axis=0)
    h = 0.0
    for k in np.flatnonzero(py > 0):
        h += py[k] * entropy(p[:, k] / py[k])
    return float(h)


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------
def _check_dm(d: int, m: int):
    if not 1 <= m <= d:
        raise ValueError(f"need 1 <= m <= d, got m={m}, d={d}")


def theorem1_bound(d: int, m: int, t) -> float:
    """Bound on cumulative Bayesian regret after ``t`` periods:
    ``sqrt(d t m (log(d/m) + 1) / 2)``."""
    _check_dm(d, m)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("t must be nonnegative")
    out = np.sqrt(0.5 * d * t_arr * m * (math.log(d / m) + 1.0))
    return float(out) if out.ndim == 0 else out


def per_capita_bound(d: int, m: int, t) -> float:
    """Per-period, per-unit bound: increment of the cumulative bound divided by m."""
    _check_dm(d, m)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 1):
        raise ValueError("t must be at least 1")
    c = math.sqrt(0.5 * (d / m) * (math.log(d / m) + 1.0))
    out = c * (np.sqrt(t_arr) - np.sqrt(t_arr - 1.0))
    return float(out) if out.ndim == 0 else out


def entropy_bound_terms(d: int, m: int) -> tuple[float, float]:
    """The last two quantities of the entropy chain:

    ``d * H(m/d)`` (the largest possible sum of marginal entropies given
    ``sum p_j = m``) and its relaxation ``m (log(d/m) + 1)``.
    """
    _check_dm(d, m)
    jensen = d * bernoulli_entropy(m / d)
    return float(jensen), m * (math.log(d / m) + 1.0)


def bound_curve(d: int, m: int, T: int) -> np.ndarray:
    """Rows ``(t, cumulative_bound, per_capita_bound)`` for ``t = 1..T``."""
    t = np.arange(1, T + 1, dtype=np.float64)
    return np.column_stack([t, theorem1_bound(d, m, t), per_capita_bound(d, m, t)])


def bound_curve_csv(d: int, m: int, T: int, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "cumulative_bound", "per_capita_bound"])
    for t, cb, pc in bound_curve(d, m, T):
        w.writerow([int(t), repr(float(cb)), repr(float(pc))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def cumulative_regret(traj) -> np.ndarray:
    """Running sums of instantaneous expected regret.

    Accepts a trajectory (anything with an ``expected_regret`` attribute)
    or an array whose last axis is time.
    """
    r = getattr(traj, "expected_regret", traj)
    return np.cumsum(np.asarray(r, dtype=np.float64), axis=-1)


# ---------------------------------------------------------------------------
# exact verification of the information inequalities on discrete priors
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DiscreteBandit:
    """Bernoulli semi-bandit with a prior on finitely many parameter vectors."""

    name: str
    support: np.ndarray      # (K, d) parameter vectors in [0, 1]
    prior: np.ndarray        # (K,) probabilities
    feasible_set: FeasibleSet

    def __post_init__(self):
        s = np.asarray(self.support, dtype=np.float64)
        p = np.asarray(self.prior, dtype=np.float64)
        if s.ndim != 2 or p.shape != (s.shape[0],):
            raise ValueError("support must be (K, d) and prior (K,)")
        if np.any((s < 0) | (s > 1)):
            raise ValueError("support points must lie in [0, 1]^d")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise ValueError("prior must be a probability vector")
        if s.shape[1] != self.feasible_set.d:
            raise ValueError("support dimension does not match the feasible set")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "prior", p)


@dataclass
class LemmaReport:
    instance: str
    depth: int
    n_nodes: int = 0
    max_regret_gap: float = -np.inf
    max_info_gap: float = -np.inf
    max_pinsker_gap: float = -np.inf
    expected_info_sum: float = 0.0
    prior_entropy_sum: float = 0.0
    jensen_term: float = 0.0
    entropy_bound: float = 0.0
    thompson_tv: float = float("nan")
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        return [
            f"instance = {self.instance}",
            f"depth = {self.depth}",
            f"nodes = {self.n_nodes}",
            f"max_regret_gap = {self.max_regret_gap!r}",
            f"max_info_gap = {self.max_info_gap!r}",
            f"max_pinsker_gap = {self.max_pinsker_gap!r}",
            f"expected_info_sum = {self.expected_info_sum!r}",
            f"prior_entropy_sum = {self.prior_entropy_sum!r}",
            f"jensen_term = {self.jensen_term!r}",
            f"entropy_bound = {self.entropy_bound!r}",
            f"thompson_tv = {self.thompson_tv!r}",
            f"ok = {self.ok}",
        ]


_SLACK = 1e-10


def verify_lemma_properties(instance: DiscreteBandit, depth: int = 3, n_mc: int = 0,
                            rng: np.random.Generator | None = None,
                            max_actions: int = 20) -> LemmaReport:
    """Check the regret inequalities exactly at every reachable history node.

    The posterior over the finite support is updated by Bayes' rule along
    every sequence of (action, revealed outcomes) of positive probability,
    for histories of length ``0..depth``. At each node the following are
    checked, for every option ``j``:

    * Pinsker: ``(mean_if_opt_j - mean_all_j)^2 <= KL(mean_if_opt_j, mean_all_j) / 2``
    * per-option information: ``p_opt_j^2 KL(mean_if_opt_j, mean_all_j) <= I(opt_j; observation)``
    * regret by information: ``expected regret <= sqrt(d/2 sum_j p_opt_j^2 KL(mean_if_opt_j, mean_all_j))``

    where ``opt_j`` indicates that option ``j`` belongs to the optimal action,
    ``p_opt_j = P(opt_j = 1)``, ``mean_all_j = E[theta_j]`` and
    ``mean_if_opt_j = E[theta_j | opt_j = 1]``,
    and the observation is the Thompson action together with its revealed
    outcomes. Finally the expected total information collected over periods
    ``1..depth+1`` is compared with the prior entropy sum and the closed-form
    ``m (log(d/m) + 1)``.

    With ``n_mc > 0`` the root Thompson distribution is also estimated by
    sampling ``n_mc`` parameter draws and solving each, and the total
    variation distance to the exact distribution is reported.
    """
    fs = instance.feasible_set
    support, prior = instance.support, instance.prior
    K, d = support.shape
    acts = _enumerate_array(fs, max_actions)
    if acts.shape[0] > max_actions:
        raise ValueError(f"instance has more than {max_actions} actions")
    m = int(acts[0].sum())
    if np.any(acts.sum(axis=1) != m):
        raise ValueError("inequality checks need actions of equal size")
    # optimal action per support point (lexicographic ties)
    vals = support @ acts.T.astype(np.float64)
    opt_idx = np.empty(K, dtype=np.int64)
    for k in range(K):
        top = vals[k].max()
        cand = np.flatnonzero(vals[k] >= top - 1e-12)
        opt_idx[k] = min(cand, key=lambda i: lex_key(acts[i]))
    opt_action = acts[opt_idx].astype(np.float64)          # (K, d)
    opt_value = vals[np.arange(K), opt_idx]               # (K,)
    # outcome patterns on each action's chosen options
    patterns = {}
    for ai, a in enumerate(acts):
        idx = np.flatnonzero(a)
        ys = np.array(list(itertools.product((0, 1), repeat=idx.size)), dtype=np.float64)
        th = support[:, idx]                                       # (K, m)
        lik = np.prod(np.where(ys[None, :, :] == 1, th[:, None, :], 1.0 - th[:, None, :]), axis=2)
        patterns[ai] = lik                                   # (K, 2^m)

    report = LemmaReport(instance.name, depth)
    jensen, closed = entropy_bound_terms(d, m)
    p_root = prior @ opt_action
    report.prior_entropy_sum = float(np.sum(bernoulli_entropy(np.clip(p_root, 0, 1))))
    report.jensen_term = jensen
    report.entropy_bound = closed

    def visit(post: np.ndarray, level: int, weight: float):
        report.n_nodes += 1
        p_opt = post @ opt_action                               # P(A*_j = 1)
        mean_all = post @ support                                        # E[theta_j]
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_if_opt = np.where(p_opt > 0, (post[:, None] * opt_action * support).sum(0) / p_opt, mean_all)
        mean_if_opt = np.clip(mean_if_opt, 0.0, 1.0)
        mean_all = np.clip(mean_all, 0.0, 1.0)
        kl = bernoulli_kl(mean_if_opt, mean_all)
        # Thompson action distribution equals the law of A*
        p_act = np.bincount(opt_idx, weights=post, minlength=acts.shape[0])
        regret = float(post @ opt_value - p_act @ (acts @ mean_all))
        lhs1 = regret
        rhs1 = math.sqrt(max(d / 2.0 * float(np.sum(p_opt ** 2 * kl)), 0.0))
        gap1 = lhs1 - rhs1
        # mutual information between A*_j and (A_t, Y_t(A_t))
        info = np.zeros(d)
        cols = []
        for ai in range(acts.shape[0]):
            if p_act[ai] <= 0:
                continue
            cols.append(p_act[ai] * post[:, None] * patterns[ai])   # (K, 2^m)
        joint_k = np.concatenate(cols, axis=1)                       # P(theta_k, obs)
        for j in range(d):
            sel = opt_action[:, j] == 1
            joint = np.vstack([joint_k[sel].sum(0), joint_k[~sel].sum(0)])
            joint = joint / joint.sum()
            info[j] = mutual_information(joint)
        lhs2 = p_opt ** 2 * kl
        gap2 = float(np.max(lhs2 - info))
        gap_p = float(np.max((mean_if_opt - mean_all) ** 2 - 0.5 * kl))
        report.max_regret_gap = max(report.max_regret_gap, gap1)
        report.max_info_gap = max(report.max_info_gap, gap2)
        report.max_pinsker_gap = max(report.max_pinsker_gap, gap_p)
        if gap1 > _SLACK:
            report.violations.append(f"regret bound at level {level}: {lhs1} > {rhs1}")
        if gap2 > _SLACK:
            report.violations.append(f"information gain bound at level {level}: gap {gap2}")
        if gap_p > _SLACK:
            report.violations.append(f"pinsker at level {level}: gap {gap_p}")
        report.expected_info_sum += float(weight * info.sum())
        if level == depth:
            return
        for ai in range(acts.shape[0]):
            if p_act[ai] <= 0:
                continue
            lik = patterns[ai]
            for yi in range(lik.shape[1]):
                joint = post * lik[:, yi]
                z = joint.sum()
                if z <= 0:
                    continue
                visit(joint / z, level + 1, weight * p_act[ai] * z)

    visit(prior.copy(), 0, 1.0)
    if report.expected_info_sum > report.prior_entropy_sum + _SLACK:
        report.violations.append(
            f"total information {report.expected_info_sum} exceeds prior entropy {report.prior_entropy_sum}")
    if report.prior_entropy_sum > jensen + _SLACK:
        report.violations.append(f"prior entropy sum {report.prior_entropy_sum} exceeds {jensen}")
    if jensen > closed + _SLACK:
        report.violations.append(f"{jensen} exceeds m(log(d/m)+1) = {closed}")

    if n_mc > 0:
        rng = rng if rng is not None else np.random.default_rng()
        ks = rng.choice(K, size=n_mc, p=prior)
        freq = np.bincount(opt_idx[ks], minlength=acts.shape[0]) / n_mc
        exact = np.bincount(opt_idx, weights=prior, minlength=acts.shape[0])
        report.thompson_tv = float(0.5 * np.abs(freq - exact).sum())
    return report


def packaged_instances() -> list[DiscreteBandit]:
    """Three small instances used by the inequality checks."""
    two_point = DiscreteBandit(
        "two_point_d2_m1",
        support=np.array([[0.8, 0.3], [0.2, 0.6]]),
        prior=np.array([0.5, 0.5]),
        feasible_set=TopM(2, 1),
    )
    # symmetric prior: each pair of arms is the good pair with probability 1/6
    pairs = list(itertools.combinations(range(4), 2))
    sym = np.full((len(pairs), 4), 0.3)
    for k, (i, j) in enumerate(pairs):
        sym[k, [i, j]] = 0.7
    symmetric = DiscreteBandit(
        "symmetric_top2_of_4",
        support=sym,
        prior=np.full(len(pairs), 1.0 / len(pairs)),
        feasible_set=TopM(4, 2),
    )
    # strongly dependent prior over 2x2 matchings
    assign = DiscreteBandit(
        "dependent_assignment_2x2",
        support=np.array([
            [0.9, 0.2, 0.3, 0.7],
            [0.2, 0.9, 0.8, 0.1],
            [0.5, 0.5, 0.5, 0.5],
        ]),
        prior=np.array([0.4, 0.4, 0.2]),
        feasible_set=Assignment(2),
    )
    return [two_point, symmetric, assign]
