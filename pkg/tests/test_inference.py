import numpy as np
import pytest
from scipy import stats

from combi_bandit.domain import DimensionError, History, TypeStructure
from combi_bandit.engine import Environment, run_episode
from combi_bandit.inference import (
    NullSpec,
    TestResult,
    mean_difference,
    p_value,
    randomization_test,
)
from combi_bandit.posterior import BetaBernoulliModel
from combi_bandit.solvers import Assignment, TopM


def _episode(seed, T=15, theta0=(0.5, 0.5, 0.5, 0.5)):
    env = Environment(np.array(theta0))
    return run_episode(env, BetaBernoulliModel(TypeStructure.identity(4)), TopM(4, 2), T,
                       np.random.default_rng(seed)).history


def _test(history, statistic, n=49, seed=0, null=None, workers=1):
    return randomization_test(history, null or NullSpec("global"), statistic, n,
                              np.random.default_rng(seed), BetaBernoulliModel(TypeStructure.identity(4)),
                              TopM(4, 2), workers=workers)


def test_p_value_convention():
    assert p_value(1.0, [0.0, 1.0, 2.0]) == pytest.approx(3 / 4)
    assert p_value(5.0, np.zeros(99)) == pytest.approx(0.01)


def test_constant_statistic_gives_one():
    res = _test(_episode(0), lambda h: 0.0)
    assert res.p_value == 1.0


def test_extreme_statistic_gives_smallest_p_value():
    hist = _episode(1)
    res = _test(hist, lambda h: 1.0 if h is hist else 0.0, n=30)
    assert res.p_value == pytest.approx(1 / 31)


def test_p_value_range_and_determinism():
    hist = _episode(2)
    stat = mean_difference([0, 1], [2, 3])
    a = _test(hist, stat, seed=5)
    b = _test(hist, stat, seed=5)
    assert np.array_equal(a.statistic_resamples, b.statistic_resamples)
    assert 1 / 50 <= a.p_value <= 1.0
    assert a.resamples_csv().splitlines()[0] == "resample_index,statistic"
    assert "p_value = " in a.report()


def test_workers_do_not_change_the_result():
    hist = _episode(3)
    stat = mean_difference([0], [3], absolute=True)
    one = _test(hist, stat, n=12, seed=6, workers=1)
    two = _test(hist, stat, n=12, seed=6, workers=2)
    assert np.array_equal(one.statistic_resamples, two.statistic_resamples)


def test_mismatched_inputs_are_errors():
    hist = _episode(4)
    with pytest.raises(DimensionError):
        randomization_test(hist, NullSpec("global"), lambda h: 0.0, 5, np.random.default_rng(0),
                           BetaBernoulliModel(TypeStructure.identity(9)), Assignment(3))
    with pytest.raises(ValueError):
        randomization_test(hist, NullSpec("global"), lambda h: 0.0, 5, np.random.default_rng(0),
                           BetaBernoulliModel(TypeStructure.identity(4)), TopM(4, 1))
    with pytest.raises(ValueError):
        NullSpec("row")
    with pytest.raises(ValueError):
        NullSpec("diagonal")


# --- imputation ---------------------------------------------------------------
def test_global_imputation_permutes_realized_outcomes():
    y = np.array([1.0, np.nan, 0.0, np.nan])
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(50):
        out = NullSpec("global").impute(y, np.array([0, 1, 0, 1]), rng)
        assert np.isnan(out[0]) and np.isnan(out[2])
        assert sorted(out[[1, 3]]) == [0.0, 1.0]
        seen.add(tuple(out[[1, 3]]))
    assert len(seen) == 2


def test_row_imputation_copies_same_type_outcomes():
    ts = TypeStructure.grid(2, 2)  # options 0,1 are u type 0; options 2,3 are u type 1
    null = NullSpec("row", ts)
    y = np.array([1.0, np.nan, 0.0, np.nan])
    out = null.impute(y, np.array([0, 1, 0, 1]), np.random.default_rng(1))
    assert out[1] == 1.0 and out[3] == 0.0


def test_column_imputation_copies_same_column_outcomes():
    ts = TypeStructure.grid(2, 2)  # options 0,2 are v type 0; options 1,3 are v type 1
    null = NullSpec("column", ts)
    y = np.array([1.0, 0.0, np.nan, np.nan])
    out = null.impute(y, np.array([0, 0, 1, 1]), np.random.default_rng(2))
    assert out[2] == 1.0 and out[3] == 0.0


def test_missing_type_falls_back_to_any_realized_outcome():
    ts = TypeStructure.grid(2, 2)
    null = NullSpec("row", ts)
    y = np.array([1.0, 1.0, np.nan, np.nan])
    out = null.impute(y, np.array([0, 0, 1, 1]), np.random.default_rng(3))
    assert list(out[[2, 3]]) == [1.0, 1.0]


def test_imputation_reuses_donors_when_exhausted():
    ts = TypeStructure.grid(1, 3)
    y = np.array([0.0, np.nan, np.nan])
    out = NullSpec("row", ts).impute(y, np.array([1, 1, 1]), np.random.default_rng(4))
    assert list(out) == [0.0, 0.0, 0.0]


def test_imputation_is_reproducible():
    y = np.array([1.0, np.nan, 0.0, 1.0])
    a = NullSpec("global").impute(y, np.array([1, 1, 1, 0]), np.random.default_rng(5))
    b = NullSpec("global").impute(y, np.array([1, 1, 1, 0]), np.random.default_rng(5))
    assert np.array_equal(a, b, equal_nan=True)


# --- calibration ---------------------------------------------------------------
def test_rank_of_observed_statistic_is_roughly_uniform():
    stat = mean_difference([0, 1], [2, 3])
    n = 19
    u = []
    tie_rng = np.random.default_rng(99)
    for s in range(150):
        hist = _episode(1000 + s, T=12)
        res = _test(hist, stat, n=n, seed=s)
        r = res.statistic_resamples
        # randomized rank in [0, 1): exactly uniform under exchangeability
        below = np.count_nonzero(r < res.statistic_observed)
        ties = np.count_nonzero(r == res.statistic_observed)
        rank = below + tie_rng.integers(0, ties + 1)
        u.append((rank + tie_rng.random()) / (n + 1))
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_result_type_is_not_collected():
    assert TestResult.__test__ is False
