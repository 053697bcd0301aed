from collections import Counter
from functools import partial

import numpy as np
import pytest

from combi_bandit.domain import DimensionError, History, TypeStructure
from combi_bandit.engine import (
    Environment,
    Family,
    ResettlementScenario,
    generate_synthetic_scenario,
    oracle_action,
    run_episode,
    run_replications,
    run_resettlement,
    simulate_beta_bernoulli_regret,
    thompson_step,
    validate_month,
)
from combi_bandit.posterior import BetaBernoulliModel
from combi_bandit.solvers import Assignment, TopM, enumerate_feasible


class PointMass:
    """Model whose posterior is a single known vector."""

    def __init__(self, theta):
        self.theta = np.asarray(theta, dtype=float)
        self.d = self.theta.size

    def sample(self, history, rng):
        return self.theta.copy()


# --- thompson step -------------------------------------------------------------
def test_uninformed_prior_picks_every_top_two_action_equally():
    fs = TopM(4, 2)
    model = BetaBernoulliModel(TypeStructure.identity(4))
    rng = np.random.default_rng(0)
    n = 60_000
    counts = Counter(tuple(thompson_step(model, History(4), fs, rng)) for _ in range(n))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / n - 1 / 6) <= 0.01


def test_point_mass_posterior_gives_the_argmax():
    fs = TopM(3, 1)
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert list(thompson_step(PointMass([0.2, 0.7, 0.4]), History(3), fs, rng)) == [0, 1, 0]


def test_probability_matching_total_variation():
    fs = TopM(5, 2)
    ts = TypeStructure.identity(5)
    model = BetaBernoulliModel(ts)
    hist = History(5)
    hist.append([1, 1, 0, 0, 0], [1.0, 0.0, np.nan, np.nan, np.nan])
    hist.append([0, 0, 1, 1, 0], [1.0, 1.0, 1.0, 0.0, 1.0])
    acts = np.array(enumerate_feasible(fs), dtype=float)
    keys = [tuple(int(x) for x in a) for a in acts]
    n = 100_000

    # reference: posterior draws scored against every feasible action
    state = model.state_for(hist)
    draws = np.random.default_rng(2).beta(state.alpha, state.beta, size=(n, 5))
    best = np.argmax(draws @ acts.T, axis=1)
    ref = np.bincount(best, minlength=len(acts)) / n

    rng = np.random.default_rng(3)
    got = Counter(tuple(int(x) for x in thompson_step(model, hist, fs, rng)) for _ in range(n))
    emp = np.array([got.get(k, 0) / n for k in keys])
    assert 0.5 * np.abs(emp - ref).sum() <= 0.02


def test_thompson_step_checks_dimensions():
    with pytest.raises(DimensionError):
        thompson_step(PointMass([0.1, 0.2]), History(2), TopM(3, 1), np.random.default_rng(0))


# --- oracle --------------------------------------------------------------------
def test_oracle_examples():
    a, v = oracle_action([0.9, 0.1], TopM(2, 1))
    assert list(a) == [1, 0] and v == pytest.approx(0.9)
    _, v = oracle_action([0.9, 0.1, 0.2, 0.8], Assignment(2))
    assert v == pytest.approx(1.7)
    for fs in (TopM(5, 3), Assignment(3)):
        _, v = oracle_action(np.full(fs.d, 0.35), fs)
        assert v == pytest.approx(fs.m * 0.35)


# --- episodes ------------------------------------------------------------------
def test_zero_length_episode():
    traj = run_episode(Environment([0.5, 0.5]), BetaBernoulliModel(TypeStructure.identity(2)),
                       TopM(2, 1), 0, np.random.default_rng(0))
    assert len(traj) == 0 and traj.actions.shape == (0, 2)


def test_constant_means_give_zero_regret():
    env = Environment(np.full(6, 0.4))
    traj = run_episode(env, BetaBernoulliModel(TypeStructure.identity(6)), TopM(6, 2), 50,
                       np.random.default_rng(1))
    assert np.all(traj.cumulative_regret == 0.0)


def test_episode_is_reproducible_and_regret_nonnegative():
    env = Environment([0.2, 0.5, 0.7, 0.4])
    make = lambda: BetaBernoulliModel(TypeStructure.identity(4))
    a = run_episode(env, make(), TopM(4, 2), 40, np.random.default_rng(5))
    b = run_episode(env, make(), TopM(4, 2), 40, np.random.default_rng(5))
    assert np.array_equal(a.actions, b.actions)
    assert a.to_csv() == b.to_csv()
    assert np.all(a.expected_regret >= 0)
    assert np.all(a.actions.sum(axis=1) == 2)


def test_actions_do_not_depend_on_future_outcomes():
    env = Environment([0.3, 0.6, 0.5, 0.45])
    fs = TopM(4, 2)
    T, cut = 30, 12
    Y = env.draw_outcomes(np.random.default_rng(7), T)
    Y2 = Y.copy()
    Y2[cut:] = Y[cut:][np.random.default_rng(8).permutation(T - cut)][:, ::-1]
    runs = [run_episode(env, BetaBernoulliModel(TypeStructure.identity(4)), fs, T,
                        np.random.default_rng(9), outcomes=y) for y in (Y, Y2)]
    # action at period t+1 may use outcomes up to t only
    assert np.array_equal(runs[0].actions[:cut + 1], runs[1].actions[:cut + 1])


def test_outcome_families():
    rng = np.random.default_rng(10)
    th = np.array([0.1, 0.5, 0.9])
    y = Environment(th).draw_outcomes(rng, 20_000)
    assert set(np.unique(y)) <= {0.0, 1.0}
    assert np.allclose(y.mean(axis=0), th, atol=0.015)
    g = Environment(th, "gaussian_truncated", sigma=0.1).draw_outcomes(rng, 20_000)
    assert g.min() >= 0 and g.max() <= 1
    assert abs(g[:, 1].mean() - 0.5) < 0.005
    bb = Environment(th, "beta_binomial", dispersion=4.0, y_max=5).draw_outcomes(rng, 20_000)
    assert set(np.unique(bb * 5)) <= set(range(6))
    assert np.allclose(bb.mean(axis=0), th, atol=0.015)
    with pytest.raises(ValueError):
        Environment(th, "poisson")


def test_vectorized_simulation_agrees_with_episodes():
    theta0 = np.array([0.3, 0.7, 0.5, 0.6])
    fs = TopM(4, 2)
    fast = simulate_beta_bernoulli_regret(theta0, fs, 60, 400, np.random.default_rng(11))
    env = Environment(theta0)
    slow = np.array([run_episode(env, BetaBernoulliModel(TypeStructure.identity(4)), fs, 60,
                                 np.random.default_rng(np.random.SeedSequence([12, r]))).expected_regret
                     for r in range(400)])
    a, b = fast.sum(axis=1), slow.sum(axis=1)
    se = np.hypot(a.std(), b.std()) / np.sqrt(400)
    assert abs(a.mean() - b.mean()) <= 4 * se


def test_replications_do_not_depend_on_worker_count():
    env = Environment([0.2, 0.8, 0.5])
    factory = partial(BetaBernoulliModel, TypeStructure.identity(3))
    one = run_replications(env, factory, TopM(3, 1), 25, 3, seed=4, workers=1)
    two = run_replications(env, factory, TopM(3, 1), 25, 3, seed=4, workers=2)
    assert [t.to_csv() for t in one] == [t.to_csv() for t in two]
    assert one[0].to_csv() != one[1].to_csv()


# --- resettlement ----------------------------------------------------------------
def _scenario(families, n_u, n_v, months, counts, theta0=None):
    theta0 = np.full(n_u * n_v, 0.5) if theta0 is None else theta0
    return ResettlementScenario(n_u, n_v, months, families, counts, theta0)


def test_single_affiliate_with_ample_capacity_places_everyone_on_arrival():
    fams = [Family(i, 1 + i % 3, i % 2, i // 4) for i in range(12)]
    sc = _scenario(fams, 2, 1, 3, [[1200.0]])
    res = run_resettlement(sc, BetaBernoulliModel(sc.type_structure), np.random.default_rng(0))
    by_id = {f.family_id: f for f in fams}
    for rec in res.months:
        assert not rec.queue_after
        for fid, k in rec.placed:
            assert by_id[fid].arrival_month == rec.month and k == 0


def test_zero_capacity_grows_the_queue():
    fams = [Family(i, 2, 0, i // 3, us_tie=(i == 4), tied_affiliate=1 if i == 4 else None)
            for i in range(12)]
    sc = _scenario(fams, 1, 2, 4, [[0.0, 0.0]])
    res = run_resettlement(sc, BetaBernoulliModel(sc.type_structure), np.random.default_rng(1))
    lengths = [len(r.queue_after) for r in res.months]
    assert lengths == [3, 5, 8, 11]
    assert all(not r.placed for r in res.months)
    assert res.months[1].tied == [(4, 1)]


def test_small_synthetic_scenario_passes_validation_every_month():
    sc = generate_synthetic_scenario(8, 3, 12, arrival_rate=15, seed=2)
    res = run_resettlement(sc, BetaBernoulliModel(sc.type_structure), np.random.default_rng(2))
    assert len(res.months) == 12
    placed = set()
    queue = []
    for rec in res.months:
        queue_before = queue + [fid for fid in rec.arrived
                                if not any(fid == f for f, _ in rec.tied)]
        assert validate_month(rec, sc, queue_before, placed) == []
        placed |= {fid for fid, _ in rec.placed + rec.tied}
        queue = rec.queue_after
    assert np.all(res.expected_regret >= 0)


def test_validator_flags_overfull_affiliate():
    fams = [Family(0, 3, 0, 0), Family(1, 3, 0, 0)]
    sc = _scenario(fams, 1, 1, 1, [[60.0]])
    res = run_resettlement(sc, BetaBernoulliModel(sc.type_structure), np.random.default_rng(3))
    rec = res.months[0]
    rec.placed = [(0, 0), (1, 0)]
    problems = validate_month(rec, sc, [0, 1], set())
    assert any("exceeds capacity" in p for p in problems)


def test_generator_is_deterministic():
    a = generate_synthetic_scenario(seed=5, months=6)
    b = generate_synthetic_scenario(seed=5, months=6)
    assert a.families == b.families
    assert np.array_equal(a.theta0, b.theta0) and np.array_equal(a.annual_counts, b.annual_counts)
    assert a.families != generate_synthetic_scenario(seed=6, months=6).families


def test_generator_edge_cases():
    assert generate_synthetic_scenario(arrival_rate=0, months=3).families == []
    sc = generate_synthetic_scenario(8, 17, 2)
    assert sc.theta0.size == 136
    assert sc.type_structure.n_cells == 136
    with pytest.raises(ValueError):
        generate_synthetic_scenario(us_tie_prob=1.5)


def test_scenario_rejects_malformed_input():
    with pytest.raises(ValueError):
        Family(0, 0, 0, 0)
    with pytest.raises(ValueError):
        Family(0, 1, 0, 0, us_tie=True)
    with pytest.raises(ValueError):
        _scenario([Family(0, 1, 5, 0)], 2, 2, 1, [[1.0, 1.0]])
    with pytest.raises(DimensionError):
        _scenario([], 2, 2, 1, [[1.0]])


def test_monthly_quota_uses_the_calendar_year():
    sc = _scenario([], 1, 2, 24, [[12.0, 24.0], [120.0, 0.0]])
    assert np.allclose(sc.monthly_quota(0), [1.1, 2.2])
    assert np.allclose(sc.monthly_quota(13), [11.0, 0.0])
