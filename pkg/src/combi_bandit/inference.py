"""Randomization inference for adaptively collected histories.

A counterfactual history is built by re-running Thompson sampling period by
period, with the outcomes of the options it picks imputed from the realized
outcomes of the same period under a null hypothesis. Comparing a statistic
on the realized history with its values on many counterfactual histories
gives a Monte Carlo p-value.
"""
from __future__ import annotations

import copy
import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from .domain import DimensionError, History, TypeStructure
from .engine import thread_limit
from .solvers import FeasibleSet, solve

__all__ = [
    "NULL_VARIANTS",
    "NullSpec",
    "TestResult",
    "randomization_test",
    "mean_difference",
    "p_value",
]

NULL_VARIANTS = ("row", "column", "global")


@dataclass(frozen=True)
class NullSpec:
    """Null hypothesis and its imputation rule.

    ``"row"``: outcomes depend on the option's u type only. A picked option
    receives a realized outcome of the same u type from the same period.
    ``"column"``: the same with the v type. ``"global"``: outcomes do not
    depend on the action; the period's realized outcomes are handed out to
    the picked options in random order.

    Within a period, donors are used without replacement while any remain,
    then with replacement. A picked option whose type has no donor in that
    period falls back to the global rule (a uniformly chosen realized outcome
    of the period).
    """

    variant: str
    type_structure: TypeStructure | None = None

    def __post_init__(self):
        if self.variant not in NULL_VARIANTS:
            raise ValueError(f"null variant must be one of {NULL_VARIANTS}, got {self.variant!r}")
        if self.variant != "global" and self.type_structure is None:
            raise ValueError(f"the {self.variant} null needs a type structure")

    def _groups(self, d: int) -> np.ndarray:
        if self.variant == "global":
            return np.zeros(d, dtype=np.int64)
        ts = self.type_structure
        if ts.d != d:
            raise DimensionError(f"type structure has d={ts.d}, history has d={d}")
        return ts.u_of if self.variant == "row" else ts.v_of

    def impute(self, realized_values, action, rng: np.random.Generator) -> np.ndarray:
        """Counterfactual outcome vector for ``action`` (NaN where not picked).

        Parameters
        ----------
        realized_values : ndarray, shape ``(d,)``
            The period's revealed outcomes, NaN where not chosen.
        action : ndarray, shape ``(d,)``
            Counterfactual action.
        """
        y = np.asarray(realized_values, dtype=np.float64)
        a = np.asarray(action)
        d = y.size
        out = np.full(d, np.nan)
        donors = np.flatnonzero(~np.isnan(y))
        picked = np.flatnonzero(a == 1)
        if donors.size == 0:
            if picked.size:
                raise ValueError("cannot impute outcomes for a period with no observations")
            return out
        group = self._groups(d)
        pools: dict[int, list] = {}
        for g in np.unique(group[picked]):
            same = donors[group[donors] == g]
            pools[int(g)] = list(rng.permutation(same))
        fallback = list(rng.permutation(donors))
        for j in picked:
            pool = pools[int(group[j])]
            source = pool if pool else fallback
            if source:
                out[j] = y[source.pop()]
            else:
                # every donor used once already: draw with replacement
                same = donors[group[donors] == group[j]]
                out[j] = y[rng.choice(same if same.size else donors)]
        return out


def p_value(observed: float, resamples) -> float:
    """Add-one Monte Carlo p-value; large statistics are evidence against the null."""
    r = np.asarray(resamples, dtype=np.float64)
    return float((1 + np.count_nonzero(r >= observed)) / (1 + r.size))


@dataclass
class TestResult:
    """Observed statistic, resampled statistics and the p-value."""

    __test__ = False  # not a pytest class

    statistic_observed: float
    statistic_resamples: np.ndarray
    p_value: float
    null: str = "global"

    @property
    def n_resamples(self) -> int:
        return int(self.statistic_resamples.size)

    def report(self, path=None) -> str:
        """Key-value text report."""
        lines = [
            f"null = {self.null}",
            f"n_resamples = {self.n_resamples}",
            f"statistic_observed = {self.statistic_observed!r}",
            f"p_value = {self.p_value!r}",
        ]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def resamples_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resample_index", "statistic"])
        for i, s in enumerate(self.statistic_resamples):
            w.writerow([i + 1, repr(float(s))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def mean_difference(group_a, group_b, absolute: bool = False) -> Callable[[History], float]:
    """Statistic: mean observed outcome on options ``group_a`` minus that on
    ``group_b`` (0-based indices). A group with no observations contributes 0.

    Returns a picklable callable.
    """
    return partial(_mean_difference, tuple(int(j) for j in group_a),
                   tuple(int(j) for j in group_b), absolute)


def _mean_difference(group_a, group_b, absolute, history: History) -> float:
    vals = history.values

    def mean(cols):
        x = vals[:, list(cols)]
        x = x[~np.isnan(x)]
        return float(x.mean()) if x.size else 0.0

    diff = mean(group_a) - mean(group_b)
    return abs(diff) if absolute else diff


def counterfactual_history(history: History, null: NullSpec, model, fs: FeasibleSet,
                           rng: np.random.Generator) -> History:
    """Re-run Thompson sampling on ``history``'s periods with imputed outcomes."""
    policy_rng, impute_rng = rng.spawn(2)
    model = copy.deepcopy(model)
    h = History(history.d)
    for rec in history:
        theta = model.sample(h, policy_rng)
        a = solve(theta, fs)
        h.append(a, null.impute(rec.values, a, impute_rng))
    return h


def _one_resample(history, null, model, fs, statistic, child_rng):
    return statistic(counterfactual_history(history, null, model, fs, child_rng))


def randomization_test(history: History, null: NullSpec, statistic: Callable[[History], float],
                       n_resamples: int, rng: np.random.Generator, model, fs: FeasibleSet,
                       workers: int | None = None) -> TestResult:
    """Randomization test of ``null`` on an adaptively collected history.

    Parameters
    ----------
    history : History
        Realized history.
    null : NullSpec
    statistic : callable
        Maps a history to a real number; large values speak against the
        null. Wrap it in ``abs`` for a two-sided test.
    n_resamples : int
    rng : numpy Generator
        Resample ``i`` uses the ``i``-th child of ``rng``, so results do not
        depend on the number of workers.
    model
        Posterior model used when the history was collected; it is copied
        for every resample.
    fs : FeasibleSet
    workers : int, optional
        Process count; defaults to ``COMBI_BANDIT_THREADS``. With more than
        one worker ``statistic`` and ``model`` must be picklable.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be at least 1")
    if history.d != fs.d or model.d != fs.d:
        raise DimensionError(f"history d={history.d}, model d={model.d}, feasible set d={fs.d}")
    for rec in history:
        if int(rec.action.sum()) != fs.m:
            raise ValueError(f"period {rec.period}: action size does not match the feasible set")
    observed = float(statistic(history))
    seqs = rng.spawn(n_resamples)
    job = partial(_one_resample, history, null, model, fs, statistic)
    workers = thread_limit() if workers is None else max(1, int(workers))
    if workers == 1:
        stats = [job(s) for s in seqs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            stats = list(ex.map(job, seqs, chunksize=max(1, n_resamples // (4 * workers))))
    res = np.asarray(stats, dtype=np.float64)
    return TestResult(observed, res, p_value(observed, res), null.variant)
