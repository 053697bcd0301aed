import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from combi_bandit.domain import History, TypeStructure
from combi_bandit.posterior import (
    BetaBernoulliModel,
    CellObservations,
    HierarchicalModel,
    HierarchicalPrior,
    PosteriorDraws,
    beta_bernoulli_state,
    beta_bernoulli_update,
    credible_interval,
    effective_sample_size,
    mc_standard_error,
    mcmc_sample_beta_binomial,
    mcmc_sample_gaussian,
    mcmc_sample_logit,
    sample_theta_beta_bernoulli,
)


def single_cell(**fixed):
    return HierarchicalPrior(use_gamma_u=False, use_gamma_v=False, fixed=fixed)


# --- Beta-Bernoulli -----------------------------------------------------------
def test_conjugate_update_examples():
    ts = TypeStructure.identity(2)
    s = beta_bernoulli_state(ts)
    s1 = beta_bernoulli_update(s, [1, 0], [1.0, np.nan])
    assert (s1.alpha[0], s1.beta[0]) == (2.0, 1.0)
    assert s1.mean[0] == pytest.approx(2 / 3)
    assert (s1.alpha[1], s1.beta[1]) == (1.0, 1.0)
    s2 = beta_bernoulli_state(ts, alpha0=2, beta0=3)
    s3 = beta_bernoulli_update(s2, [1, 0], [0.0, np.nan])
    assert (s3.alpha[0], s3.beta[0]) == (2.0, 4.0)


def test_conjugate_update_rejects_non_binary():
    s = beta_bernoulli_state(TypeStructure.identity(2))
    with pytest.raises(ValueError):
        beta_bernoulli_update(s, [1, 0], [0.5, np.nan])


def test_uniform_prior_draws_are_uniform():
    s = beta_bernoulli_state(TypeStructure.identity(3))
    rng = np.random.default_rng(0)
    x = np.array([sample_theta_beta_bernoulli(s, rng)[1] for _ in range(10_000)])
    assert stats.kstest(x, "uniform").pvalue > 0.01


def test_concentrated_posterior():
    s = beta_bernoulli_state(TypeStructure.identity(1), alpha0=1e6, beta0=1)
    rng = np.random.default_rng(1)
    assert all(sample_theta_beta_bernoulli(s, rng)[0] > 1 - 1e-3 for _ in range(100))


def test_shared_cell_gets_identical_draws():
    ts = TypeStructure(np.array([0, 0, 1]), np.array([0, 0, 0]), 2, 1)
    s = beta_bernoulli_state(ts)
    s = beta_bernoulli_update(s, [1, 0, 1], [1.0, np.nan, 0.0])
    # both options of cell 0 are updated together
    assert s.alpha[0] == s.alpha[1] == 2.0
    theta = sample_theta_beta_bernoulli(s, np.random.default_rng(2))
    assert theta[0] == theta[1]


def test_model_tracks_growing_history():
    ts = TypeStructure.identity(2)
    model = BetaBernoulliModel(ts)
    h = History(2)
    h.append([1, 0], [1.0, 0.0])
    h.append([1, 0], [1.0, 0.0])
    st = model.state_for(h)
    assert st.alpha[0] == 3.0
    h.append([0, 1], [0.0, 0.0])
    st = model.state_for(h)
    assert st.beta[1] == 2.0
    assert model.state_for(History(2)).alpha[0] == 1.0


# --- credible intervals ---------------------------------------------------------
def test_credible_interval_examples():
    assert credible_interval(np.full((5, 1), 0.3), 0) == (0.3, 0.3)
    lo, hi = credible_interval(np.arange(1, 11) / 10, 0, 0.8)
    assert lo == pytest.approx(0.19) and hi == pytest.approx(0.91)
    rng = np.random.default_rng(0)
    x = rng.random((200, 2))
    lo95, hi95 = credible_interval(x, 1, 0.95)
    lo50, hi50 = credible_interval(x, 1, 0.5)
    assert lo95 <= lo50 <= hi50 <= hi95


def test_credible_interval_needs_two_draws():
    with pytest.raises(ValueError):
        credible_interval(np.array([[0.5]]), 0)


# --- diagnostics -----------------------------------------------------------------
def test_ess_of_independent_draws_is_near_n():
    x = np.random.default_rng(3).standard_normal(4000)
    assert 3000 < effective_sample_size(x) <= 4000 * 1.2
    assert mc_standard_error(x) == pytest.approx(x.std() / np.sqrt(4000), rel=0.2)


def test_ess_of_correlated_chain_is_smaller():
    rng = np.random.default_rng(4)
    x = np.zeros(4000)
    for i in range(1, 4000):
        x[i] = 0.9 * x[i - 1] + rng.standard_normal()
    # AR(1) with rho=0.9: ESS about n (1-rho)/(1+rho)
    assert 100 < effective_sample_size(x) < 500


# --- Gaussian model -------------------------------------------------------------
def test_gaussian_collapsed_posterior_moments():
    obs = CellObservations(1, 1, [0], [1.0])
    fit = mcmc_sample_gaussian(obs, prior=single_cell(mu=0.0, tau_uv_sq=1.0, sigma_sq=1.0),
                               n_draws=4000, rng=np.random.default_rng(0), warmup=200)
    g = fit.cell_draws[:, 0]
    assert abs(g.mean() - 0.5) <= 3 * mc_standard_error(g)
    assert g.var() == pytest.approx(0.5, rel=0.08)


def test_gaussian_empty_data_chain_recovers_prior():
    prior = single_cell(mu=0.3, tau_uv_sq=0.5, sigma_sq=1.0)
    fit = mcmc_sample_gaussian(CellObservations.empty(1, 1), prior=prior, n_draws=4000,
                               rng=np.random.default_rng(1), warmup=100, prior_shortcut=False)
    g = fit.cell_draws[:, 0]
    assert abs(g.mean() - 0.3) <= 4 * mc_standard_error(g)
    assert g.var() == pytest.approx(0.5, rel=0.1)


def test_gaussian_symmetric_types_have_matching_marginals():
    # two u types with identical data in a 2 x 1 grid
    obs = CellObservations(2, 1, [0, 0, 1, 1], [0.8, 0.6, 0.8, 0.6])
    fit = mcmc_sample_gaussian(obs, n_draws=4000, rng=np.random.default_rng(2), warmup=1000)
    a, b = fit.cell_draws[:, 0], fit.cell_draws[:, 1]
    se = np.hypot(mc_standard_error(a), mc_standard_error(b))
    assert abs(a.mean() - b.mean()) <= 4 * se


def test_gaussian_draws_keep_values_outside_unit_interval():
    obs = CellObservations(1, 1, [0, 0], [1.0, 1.0])
    fit = mcmc_sample_gaussian(obs, prior=single_cell(mu=1.0, tau_uv_sq=1.0, sigma_sq=1.0),
                               n_draws=500, rng=np.random.default_rng(3), warmup=100)
    assert fit.cell_draws.max() > 1.0


# --- logit model -----------------------------------------------------------------
def test_logit_matches_grid_quadrature():
    y = np.array([1.0] * 5 + [0.0] * 15)
    obs = CellObservations(1, 1, np.zeros(20, dtype=int), y)
    grid = np.linspace(-12, 12, 10_000)
    logw = stats.norm.logpdf(grid, 0.5, 1.0) + 5 * np.log(expit(grid)) + 15 * np.log(expit(-grid))
    w = np.exp(logw - logw.max())
    oracle = (expit(grid) * w).sum() / w.sum()
    fit = mcmc_sample_logit(obs, prior=single_cell(mu=0.5, tau_uv_sq=1.0), n_draws=4000,
                            rng=np.random.default_rng(4), warmup=500)
    th = fit.cell_draws[:, 0]
    assert abs(th.mean() - oracle) <= 3 * mc_standard_error(th)


def test_logit_prior_push_forward_without_data():
    prior = single_cell(mu=-0.5, tau_uv_sq=0.8)
    fit = mcmc_sample_logit(CellObservations.empty(1, 1), prior=prior, n_draws=4000,
                            rng=np.random.default_rng(5), warmup=200, prior_shortcut=False)
    direct = expit(np.random.default_rng(6).normal(-0.5, np.sqrt(0.8), 100_000))
    th = fit.cell_draws[:, 0]
    assert abs(th.mean() - direct.mean()) <= 4 * mc_standard_error(th)


def test_logit_all_successes_raise_the_mean():
    ts = TypeStructure.identity(2)
    h = History(2)
    for _ in range(30):
        h.append([1, 0], [1.0, np.nan])
    fit = mcmc_sample_logit(h, ts, n_draws=1000, rng=np.random.default_rng(7), warmup=500)
    assert fit.draws[:, 0].mean() > 0.5 + 0.2
    assert np.all((fit.draws > 0) & (fit.draws < 1))


def test_logit_rejects_non_binary():
    obs = CellObservations(1, 1, [0], [0.5])
    with pytest.raises(ValueError):
        mcmc_sample_logit(obs, n_draws=10, rng=np.random.default_rng(0))


def test_empty_history_returns_prior_draws():
    ts = TypeStructure.grid(2, 3)
    fit = mcmc_sample_logit(History(6), ts, n_draws=300, rng=np.random.default_rng(8))
    assert isinstance(fit, PosteriorDraws)
    assert fit.draws.shape == (300, 6)
    assert fit.chain_diagnostics.get("prior_only") == 1.0


def test_same_seed_same_draws():
    ts = TypeStructure.identity(3)
    h = History(3)
    h.append([1, 1, 0], [1.0, 0.0, np.nan])
    a = mcmc_sample_logit(h, ts, n_draws=50, rng=np.random.default_rng(9), warmup=50)
    b = mcmc_sample_logit(h, ts, n_draws=50, rng=np.random.default_rng(9), warmup=50)
    assert np.array_equal(a.draws, b.draws)


def test_shared_cells_are_bit_identical_in_hierarchical_draws():
    ts = TypeStructure(np.array([0, 0, 1]), np.array([0, 0, 0]), 2, 1)
    h = History(3)
    h.append([1, 0, 1], [1.0, np.nan, 0.0])
    fit = mcmc_sample_logit(h, ts, n_draws=100, rng=np.random.default_rng(10), warmup=50)
    assert np.array_equal(fit.draws[:, 0], fit.draws[:, 1])


# --- Beta-Binomial model ----------------------------------------------------------
def test_beta_binomial_matches_grid_quadrature_with_fixed_dispersion():
    ybar, disp = 5, 3.0
    counts = np.array([4, 5, 3, 4, 2, 5, 4, 3])
    obs = CellObservations(1, 1, np.zeros(counts.size, dtype=int), counts.astype(float))
    prior = HierarchicalPrior(use_gamma_u=False, use_gamma_v=False, y_max=ybar,
                              fixed={"mu": 0.0, "tau_uv_sq": 1.5, "dispersion": disp})
    grid = np.linspace(-12, 12, 10_000)
    p = expit(grid)
    loglik = stats.betabinom.logpmf(counts[:, None], ybar, disp * p[None, :],
                                    disp * (1 - p[None, :])).sum(axis=0)
    logw = stats.norm.logpdf(grid, 0.0, np.sqrt(1.5)) + loglik
    w = np.exp(logw - logw.max())
    oracle = (p * w).sum() / w.sum()
    fit = mcmc_sample_beta_binomial(obs, prior=prior, n_draws=4000,
                                    rng=np.random.default_rng(11), warmup=500)
    th = fit.cell_draws[:, 0]
    assert abs(th.mean() - oracle) <= 3 * mc_standard_error(th)


def test_beta_binomial_history_values_are_rescaled_counts():
    ts = TypeStructure.identity(1)
    h = History(1)
    h.append([1], [0.4])  # 2 of 5
    prior = HierarchicalPrior(y_max=5)
    fit = mcmc_sample_beta_binomial(h, ts, prior=prior, n_draws=20,
                                    rng=np.random.default_rng(12), warmup=20)
    assert fit.draws.shape == (20, 1)


def test_beta_binomial_rejects_counts_outside_support():
    obs = CellObservations(1, 1, [0], [3.0])
    with pytest.raises(ValueError):
        mcmc_sample_beta_binomial(obs, prior=HierarchicalPrior(y_max=2), n_draws=10,
                                  rng=np.random.default_rng(0))


# --- model wrapper ------------------------------------------------------------------
def test_hierarchical_model_refits_on_cadence():
    ts = TypeStructure.identity(2)
    model = HierarchicalModel("logit_hier", ts, warmup=20, refit_every=3)
    h = History(2)
    h.append([1, 0], [1.0, np.nan])
    rng = np.random.default_rng(13)
    model.sample(h, rng)
    first_fit = model.last_fit
    model.sample(h, rng)
    model.sample(h, rng)
    assert model.last_fit is first_fit
    model.sample(h, rng)
    assert model.last_fit is not first_fit


def test_gaussian_model_wrapper_clips_for_the_solver():
    ts = TypeStructure.identity(1)
    model = HierarchicalModel("gaussian_hier", ts, warmup=20,
                              prior=HierarchicalPrior(fixed={"mu": 3.0}))
    theta = model.sample(History(1), np.random.default_rng(14))
    assert 0.0 <= theta[0] <= 1.0
