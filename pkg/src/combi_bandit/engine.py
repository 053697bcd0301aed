"""Thompson sampling loop, outcome environments and the resettlement simulation.

Randomness is split into independent streams: the policy stream (posterior
draws) and the outcome stream (potential outcomes). Potential outcomes for
all periods are drawn before the loop starts, so the action at period ``t``
can only depend on what the history has revealed so far.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import stats

from .domain import DimensionError, History, TypeStructure, as_theta
from .posterior import BetaBernoulliModel, CellObservations
from .solvers import (
    FeasibleSet,
    MultipleKnapsack,
    check_action,
    solve,
    solve_batch,
)

__all__ = [
    "OUTCOME_FAMILIES",
    "Environment",
    "Trajectory",
    "thompson_step",
    "oracle_action",
    "run_episode",
    "replication_seeds",
    "run_replications",
    "simulate_beta_bernoulli_regret",
    "Family",
    "ResettlementScenario",
    "MonthRecord",
    "ResettlementResult",
    "generate_synthetic_scenario",
    "run_resettlement",
    "validate_month",
    "thread_limit",
]

OUTCOME_FAMILIES = ("bernoulli", "gaussian_truncated", "beta_binomial")


def thread_limit(default: int = 1) -> int:
    """Worker cap read from ``COMBI_BANDIT_THREADS`` (at least 1)."""
    raw = os.environ.get("COMBI_BANDIT_THREADS", "")
    try:
        n = int(raw) if raw.strip() else default
    except ValueError:
        raise ValueError(f"COMBI_BANDIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# environment and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Environment:
    """True parameters and the distribution of the outcome vectors.

    Parameters
    ----------
    theta0 : array_like
        Mean outcome of every option, in ``[0, 1]``.
    outcome_family : {"bernoulli", "gaussian_truncated", "beta_binomial"}
    sigma : float
        Standard deviation before truncation (``gaussian_truncated``).
        Truncation to ``[0, 1]`` moves the mean away from ``theta0`` near
        the edges; regret is still measured at ``theta0``.
    dispersion : float
        Beta-Binomial concentration; success probability ``~ Beta(s*theta, s*(1-theta))``.
    y_max : int
        Beta-Binomial trials. Outcomes are reported as ``count / y_max``.
    """

    theta0: np.ndarray
    outcome_family: str = "bernoulli"
    sigma: float = 0.1
    dispersion: float = 2.0
    y_max: int = 1

    def __post_init__(self):
        object.__setattr__(self, "theta0", as_theta(self.theta0))
        if self.outcome_family not in OUTCOME_FAMILIES:
            raise ValueError(f"unknown outcome family {self.outcome_family!r}")
        if self.sigma <= 0 or self.dispersion <= 0 or self.y_max < 1:
            raise ValueError("sigma and dispersion must be positive and y_max at least 1")

    @property
    def d(self) -> int:
        return int(self.theta0.size)

    def draw_outcomes(self, rng: np.random.Generator, T: int) -> np.ndarray:
        """Potential outcomes, shape ``(T, d)``, i.i.d. across periods."""
        th = np.broadcast_to(self.theta0, (T, self.d))
        if self.outcome_family == "bernoulli":
            return (rng.random((T, self.d)) < th).astype(np.float64)
        if self.outcome_family == "gaussian_truncated":
            lo = (0.0 - th) / self.sigma
            hi = (1.0 - th) / self.sigma
            return stats.truncnorm.rvs(lo, hi, loc=th, scale=self.sigma, size=(T, self.d),
                                       random_state=rng)
        a = np.maximum(self.dispersion * th, 1e-12)
        b = np.maximum(self.dispersion * (1.0 - th), 1e-12)
        p = rng.beta(a, b)
        return rng.binomial(self.y_max, p) / self.y_max


@dataclass
class Trajectory:
    """Per-period record of one Thompson episode.

    ``actions``, ``outcomes`` (revealed, NaN where not chosen) and
    ``theta_hat`` have shape ``(T, d)``; the regret and reward arrays have
    length ``T``.
    """

    actions: np.ndarray
    outcomes: np.ndarray
    theta_hat: np.ndarray
    expected_regret: np.ndarray
    realized_reward: np.ndarray
    oracle_action: np.ndarray
    oracle_value: float
    history: History | None = None

    def __len__(self) -> int:
        return int(self.expected_regret.size)

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.expected_regret)

    def to_csv(self, path=None) -> str:
        """Columns ``period, action, expected_regret, cumulative_regret,
        realized_reward``; ``action`` lists the chosen 1-based option
        indices joined by ``;``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "action", "expected_regret", "cumulative_regret", "realized_reward"])
        cum = self.cumulative_regret
        for t in range(len(self)):
            chosen = ";".join(str(j + 1) for j in np.flatnonzero(self.actions[t]))
            w.writerow([t + 1, chosen, repr(float(self.expected_regret[t])),
                        repr(float(cum[t])), repr(float(self.realized_reward[t]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def thompson_step(model, history: History, fs: FeasibleSet, rng: np.random.Generator,
                  return_theta: bool = False):
    """Draw one parameter vector from the posterior and return its exact argmax."""
    if model.d != fs.d or history.d != fs.d:
        raise DimensionError(f"model d={model.d}, history d={history.d}, feasible set d={fs.d}")
    theta = model.sample(history, rng)
    action = solve(theta, fs)
    return (action, theta) if return_theta else action


def oracle_action(theta0, fs: FeasibleSet) -> tuple[np.ndarray, float]:
    """Best action under the true parameters and its expected reward."""
    t = as_theta(theta0)
    if t.size != fs.d:
        raise DimensionError(f"theta0 has length {t.size}, feasible set has d={fs.d}")
    a = solve(t, fs)
    return a, float(a @ t)


def run_episode(env: Environment, model, fs: FeasibleSet, T: int, rng: np.random.Generator,
                outcomes=None) -> Trajectory:
    """Run ``T`` periods of Thompson sampling against ``env``.

    Parameters
    ----------
    outcomes : ndarray, optional
        Potential outcomes ``(T, d)`` to use instead of drawing them.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    d = fs.d
    if env.d != d or model.d != d:
        raise DimensionError(f"environment d={env.d}, model d={model.d}, feasible set d={d}")
    policy_rng, outcome_rng = rng.spawn(2)
    if outcomes is None:
        Y = env.draw_outcomes(outcome_rng, T)
    else:
        Y = np.asarray(outcomes, dtype=np.float64)
        if Y.shape != (T, d):
            raise DimensionError(f"outcomes must have shape {(T, d)}, got {Y.shape}")
    best, best_val = oracle_action(env.theta0, fs)
    hist = History(d)
    actions = np.zeros((T, d), dtype=np.int8)
    thetas = np.zeros((T, d))
    for t in range(T):
        a, th = thompson_step(model, hist, fs, policy_rng, return_theta=True)
        hist.append(a, Y[t])
        actions[t] = a
        thetas[t] = th
    regret = np.maximum(best_val - actions @ env.theta0, 0.0)
    revealed = hist.values
    realized = (actions * Y).sum(axis=1)
    return Trajectory(actions, revealed, thetas, regret, realized, best, best_val, hist)


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------

def replication_seeds(seed: int, reps: int) -> list[np.random.SeedSequence]:
    """One independent seed sequence per replication, derived from ``(seed, r)``."""
    return [np.random.SeedSequence([int(seed), r]) for r in range(reps)]


def _one_replication(env, model_factory, fs, T, seq):
    return run_episode(env, model_factory(), fs, T, np.random.default_rng(seq))


def run_replications(env: Environment, model_factory, fs: FeasibleSet, T: int, reps: int,
                     seed: int = 0, workers: int | None = None) -> list[Trajectory]:
    """Independent episodes; ``model_factory()`` builds a fresh model per episode.

    With ``workers > 1`` episodes run in a process pool; the factory must then
    be picklable (a class or ``functools.partial``). Results do not depend on
    the worker count.
    """
    seqs = replication_seeds(seed, reps)
    workers = thread_limit() if workers is None else max(1, int(workers))
    job = partial(_one_replication, env, model_factory, fs, T)
    if workers == 1 or reps <= 1:
        return [job(s) for s in seqs]
    with ProcessPoolExecutor(max_workers=min(workers, reps)) as ex:
        return list(ex.map(job, seqs))


def simulate_beta_bernoulli_regret(theta0, fs: FeasibleSet, T: int, reps: int,
                                   rng: np.random.Generator, alpha0: float = 1.0,
                                   beta0: float = 1.0) -> np.ndarray:
    """Expected regret of Thompson sampling with independent Beta priors.

    All replications are advanced together: one vectorized posterior draw
    and one batched solve per period. Statistically identical to calling
    :func:`run_episode` ``reps`` times with a Bernoulli environment and a
    :class:`BetaBernoulliModel` on the identity type structure.

    Returns
    -------
    ndarray, shape ``(reps, T)``
        Instantaneous expected regret.
    """
    th0 = as_theta(theta0)
    d = th0.size
    if d != fs.d:
        raise DimensionError(f"theta0 has length {d}, feasible set has d={fs.d}")
    policy_rng, outcome_rng = rng.spawn(2)
    _, best_val = oracle_action(th0, fs)
    a = np.full((reps, d), float(alpha0))
    b = np.full((reps, d), float(beta0))
    regret = np.zeros((reps, T))
    for t in range(T):
        draws = policy_rng.beta(a, b)
        acts = solve_batch(draws, fs).astype(np.float64)
        y = (outcome_rng.random((reps, d)) < th0).astype(np.float64)
        a += acts * y
        b += acts * (1.0 - y)
        regret[:, t] = best_val - acts @ th0
    return np.maximum(regret, 0.0)


# ---------------------------------------------------------------------------
# resettlement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Family:
    """One case. Ids are 0-based; ``affiliate`` is the historical placement
    (used only to calibrate capacities)."""

    family_id: int
    size: int
    u_type: int
    arrival_month: int
    us_tie: bool = False
    tied_affiliate: int | None = None
    affiliate: int | None = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"family {self.family_id}: size must be at least 1")
        if self.us_tie != (self.tied_affiliate is not None):
            raise ValueError(f"family {self.family_id}: tied_affiliate must be set exactly when us_tie")


@dataclass
class ResettlementScenario:
    """Monthly arrivals, capacities and calibrated cell parameters.

    Parameters
    ----------
    n_u, n_v : int
        Number of refugee types and affiliates.
    months : int
    families : list of Family
    annual_counts : ndarray, shape ``(n_years, n_v)``
        People without US ties actually resettled per affiliate and year.
        Month ``t`` uses year ``t // 12`` (the last row is reused beyond it).
    theta0 : ndarray, shape ``(n_u * n_v,)``
        Employment probability per (type, affiliate) cell, row-major.
    capacity_factor : float
        Annual capacity is ``capacity_factor * annual_counts``.
    ties_consume_capacity : bool
        Whether tied families are deducted from their affiliate's balance.
    """

    n_u: int
    n_v: int
    months: int
    families: list
    annual_counts: np.ndarray
    theta0: np.ndarray
    capacity_factor: float = 1.1
    ties_consume_capacity: bool = False

    def __post_init__(self):
        self.annual_counts = np.atleast_2d(np.asarray(self.annual_counts, dtype=np.float64))
        self.theta0 = as_theta(self.theta0)
        if self.annual_counts.shape[1] != self.n_v:
            raise DimensionError("annual_counts needs one column per affiliate")
        if np.any(self.annual_counts < 0):
            raise ValueError("annual counts must be non-negative")
        if self.theta0.size != self.n_u * self.n_v:
            raise DimensionError("theta0 needs one entry per (type, affiliate) cell")
        ids = set()
        for f in self.families:
            if f.family_id in ids:
                raise ValueError(f"duplicate family id {f.family_id}")
            ids.add(f.family_id)
            if not 0 <= f.u_type < self.n_u:
                raise ValueError(f"family {f.family_id}: u_type out of range")
            if not 0 <= f.arrival_month < self.months:
                raise ValueError(f"family {f.family_id}: arrival month out of range")
            if f.us_tie and not 0 <= f.tied_affiliate < self.n_v:
                raise ValueError(f"family {f.family_id}: tied affiliate out of range")

    @property
    def type_structure(self) -> TypeStructure:
        return TypeStructure.grid(self.n_u, self.n_v)

    def monthly_quota(self, month: int) -> np.ndarray:
        year = min(month // 12, self.annual_counts.shape[0] - 1)
        return self.capacity_factor * self.annual_counts[year] / 12.0

    def arrivals(self, month: int) -> list:
        return [f for f in self.families if f.arrival_month == month]


@dataclass
class MonthRecord:
    month: int
    arrived: list
    tied: list
    placed: list
    queue_after: list
    capacity_before: np.ndarray
    balance_after: np.ndarray
    expected_regret: float
    oracle_value: float
    chosen_value: float
    outcomes: dict


@dataclass
class ResettlementResult:
    scenario: ResettlementScenario
    months: list = field(default_factory=list)

    @property
    def expected_regret(self) -> np.ndarray:
        return np.array([r.expected_regret for r in self.months])

    def placements_csv(self, path=None) -> str:
        """One row per placed family: ``month, family_id, affiliate, size,
        u_type, us_tie, outcome`` (1-based month, affiliate and type)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["month", "family_id", "affiliate", "size", "u_type", "us_tie", "outcome"])
        by_id = {f.family_id: f for f in self.scenario.families}
        for rec in self.months:
            for fid, k in rec.tied + rec.placed:
                f = by_id[fid]
                w.writerow([rec.month + 1, fid, k + 1, f.size, f.u_type + 1, int(f.us_tie),
                            int(rec.outcomes[fid])])
        return _write(buf.getvalue(), path)

    def months_csv(self, path=None) -> str:
        """One row per month with arrivals, placements, queue and regret."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["month", "arrived", "tied", "placed", "queue_length", "capacity_available",
                    "oracle_value", "chosen_value", "expected_regret", "cumulative_regret",
                    "employed"])
        cum = 0.0
        for rec in self.months:
            cum += rec.expected_regret
            w.writerow([rec.month + 1, len(rec.arrived), len(rec.tied), len(rec.placed),
                        len(rec.queue_after), int(np.floor(rec.capacity_before + 1e-9).sum()),
                        repr(rec.oracle_value), repr(rec.chosen_value),
                        repr(rec.expected_regret), repr(cum), sum(rec.outcomes.values())])
        return _write(buf.getvalue(), path)


def _write(text, path):
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def generate_synthetic_scenario(k_u: int = 8, k_v: int = 17, months: int = 24,
                                arrival_rate: float = 40.0, seed: int = 0,
                                us_tie_prob: float = 0.3, size_decay: float = 0.55,
                                capacity_factor: float = 1.1,
                                effect_sds: tuple = (0.6, 0.4, 0.2),
                                base_logit: float = -0.4) -> ResettlementScenario:
    """Reproducible stand-in for a case file.

    Monthly arrivals are Poisson(``arrival_rate``); family sizes in 1..8 with
    probabilities proportional to ``size_decay ** (size - 1)``; types and
    affiliates follow Dirichlet-drawn popularity weights. Cell parameters come
    from an additive logit model with effect standard deviations
    ``effect_sds`` (type, affiliate, interaction). Annual counts are the
    historical placements of families without ties.
    """
    if min(k_u, k_v, months) < 1 or arrival_rate < 0:
        raise ValueError("type counts and months must be positive, arrival_rate non-negative")
    if not 0 <= us_tie_prob <= 1:
        raise ValueError("us_tie_prob must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E771E]))
    sd_u, sd_v, sd_uv = effect_sds
    eta = (base_logit + sd_u * rng.standard_normal(k_u)[:, None]
           + sd_v * rng.standard_normal(k_v)[None, :] + sd_uv * rng.standard_normal((k_u, k_v)))
    theta0 = (1.0 / (1.0 + np.exp(-eta))).ravel()
    sizes = np.arange(1, 9)
    size_p = size_decay ** (sizes - 1)
    size_p /= size_p.sum()
    type_p = rng.dirichlet(np.full(k_u, 2.0))
    aff_p = rng.dirichlet(np.full(k_v, 2.0))
    n_years = (months + 11) // 12
    counts = np.zeros((n_years, k_v))
    families = []
    for t in range(months):
        for _ in range(rng.poisson(arrival_rate)):
            size = int(rng.choice(sizes, p=size_p))
            u = int(rng.choice(k_u, p=type_p))
            hist_aff = int(rng.choice(k_v, p=aff_p))
            tie = bool(rng.random() < us_tie_prob)
            if not tie:
                counts[t // 12, hist_aff] += size
            families.append(Family(len(families), size, u, t, tie, hist_aff if tie else None,
                                   hist_aff))
    return ResettlementScenario(k_u, k_v, months, families, counts, theta0, capacity_factor)


def validate_month(rec: MonthRecord, scenario: ResettlementScenario, queue_before: list,
                   placed_so_far: set) -> list[str]:
    """Capacity and family-integrity checks for one month. Returns problems."""
    problems = []
    by_id = {f.family_id: f for f in scenario.families}
    load = np.zeros(scenario.n_v)
    seen = set()
    for fid, k in rec.placed:
        if fid in seen or fid in placed_so_far:
            problems.append(f"month {rec.month}: family {fid} placed twice")
        seen.add(fid)
        if fid not in queue_before:
            problems.append(f"month {rec.month}: family {fid} was not waiting")
        if by_id[fid].us_tie:
            problems.append(f"month {rec.month}: tied family {fid} placed by the solver")
        load[k] += by_id[fid].size
    for fid, k in rec.tied:
        f = by_id[fid]
        if fid in seen or fid in placed_so_far:
            problems.append(f"month {rec.month}: family {fid} placed twice")
        seen.add(fid)
        if k != f.tied_affiliate:
            problems.append(f"month {rec.month}: tied family {fid} not at its tied affiliate")
    caps = np.floor(rec.capacity_before + 1e-9)
    over = np.flatnonzero(load > caps)
    for k in over:
        problems.append(f"month {rec.month}: affiliate {k} load {load[k]:g} exceeds capacity {caps[k]:g}")
    if np.any(rec.balance_after < -1e-9):
        problems.append(f"month {rec.month}: negative capacity balance")
    if set(rec.queue_after) & seen:
        problems.append(f"month {rec.month}: placed family still queued")
    return problems


def run_resettlement(scenario: ResettlementScenario, model, rng: np.random.Generator,
                     validate: bool = True) -> ResettlementResult:
    """Monthly matching of families to affiliates by Thompson sampling.

    Each month: add the quota to every affiliate's balance; place arriving
    tied families at their tied affiliate; append the other arrivals to the
    queue; draw cell parameters from ``model.sample_cells`` and solve the
    multiple knapsack over the queue (value of a family = drawn parameter of
    its (type, affiliate) cell, weight = size, capacity = whole part of the
    balance); deduct placed sizes and carry the rest forward. Employment
    outcomes are Bernoulli at ``theta0``; each family's uniform is drawn up
    front so outcomes do not depend on the policy stream. Tied placements
    are observed too and feed the posterior.

    Regret for a month is the myopic gap at ``theta0`` on the same queue and
    capacities.
    """
    sc = scenario
    n_v = sc.n_v
    policy_rng, outcome_rng = rng.spawn(2)
    uniforms = {f.family_id: u for f, u in zip(sc.families, outcome_rng.random(len(sc.families)))}
    by_id = {f.family_id: f for f in sc.families}
    obs = CellObservations.empty(sc.n_u, n_v)
    balance = np.zeros(n_v)
    queue: list[int] = []
    placed_ids: set = set()
    arrived_total = 0
    result = ResettlementResult(sc)

    def employ(fid, k):
        cell = by_id[fid].u_type * n_v + k
        return cell, int(uniforms[fid] < sc.theta0[cell])

    for t in range(sc.months):
        balance = balance + sc.monthly_quota(t)
        arrivals = sc.arrivals(t)
        arrived_total += len(arrivals)
        outcomes: dict = {}
        new_cells, new_y = [], []
        tied = []
        for f in arrivals:
            if f.us_tie:
                tied.append((f.family_id, f.tied_affiliate))
                if sc.ties_consume_capacity:
                    k = f.tied_affiliate
                    balance[k] = max(0.0, balance[k] - f.size)
            else:
                queue.append(f.family_id)
        caps = np.floor(balance + 1e-9).astype(np.int64)
        capacity_before = balance.copy()
        queue_before = list(queue)
        placed: list = []
        oracle_val = chosen_val = 0.0
        fits = [fid for fid in queue if by_id[fid].size <= caps.max(initial=0)]
        if fits:
            sizes = [by_id[fid].size for fid in fits]
            fs = MultipleKnapsack(sizes, caps.tolist())
            cells = np.array([by_id[fid].u_type * n_v for fid in fits])[:, None] + np.arange(n_v)
            theta_hat = np.asarray(model.sample_cells(obs, policy_rng))
            action = solve(theta_hat[cells].ravel(), fs)
            values0 = sc.theta0[cells].ravel()
            oracle = solve(values0, fs)
            oracle_val = float(oracle @ values0)
            chosen_val = float(action @ values0)
            if validate:
                bad = check_action(action, fs)
                if bad:
                    raise RuntimeError(f"month {t}: solver returned an infeasible action: {bad}")
            for i, k in zip(*np.nonzero(action.reshape(len(fits), n_v))):
                placed.append((fits[i], int(k)))
        for fid, k in placed:
            balance[k] -= by_id[fid].size
        balance = np.maximum(balance, 0.0)
        done = {fid for fid, _ in placed}
        queue = [fid for fid in queue if fid not in done]
        for fid, k in tied + placed:
            cell, y = employ(fid, k)
            outcomes[fid] = y
            new_cells.append(cell)
            new_y.append(float(y))
        if new_cells:
            obs = obs.extended(new_cells, new_y)
        rec = MonthRecord(t, [f.family_id for f in arrivals], tied, placed, list(queue),
                          capacity_before, balance.copy(), max(oracle_val - chosen_val, 0.0),
                          oracle_val, chosen_val, outcomes)
        if validate:
            problems = validate_month(rec, sc, queue_before, placed_ids)
            if problems:
                raise RuntimeError("; ".join(problems))
        placed_ids |= {fid for fid, _ in tied + placed}
        n_tied_total = sum(1 for fid in placed_ids if by_id[fid].us_tie)
        if arrived_total != len(placed_ids) + len(queue):
            raise RuntimeError(f"month {t}: carryover not conserved ({arrived_total} arrived, "
                               f"{len(placed_ids)} placed incl. {n_tied_total} tied, {len(queue)} queued)")
        result.months.append(rec)
    return result


def default_resettlement_model(scenario: ResettlementScenario) -> BetaBernoulliModel:
    """Independent Beta(1, 1) priors per cell."""
    return BetaBernoulliModel(scenario.type_structure)
