"""Posterior models over option means.

Two kinds of model are provided:

* a conjugate Beta-Bernoulli model pooled at the (u, v) cell level, and
* three hierarchical models in which the cell parameter is built from a
  u-type effect, a v-type effect and an interaction::

      eta[u, v] = gamma_u[u] + gamma_v[v] + gamma_uv[u, v]
      gamma_u ~ N(0, tau_u^2),  gamma_v ~ N(0, tau_v^2),  gamma_uv ~ N(mu, tau_uv^2)

  with ``theta = eta`` (Gaussian outcomes) or ``theta = expit(eta)``
  (Bernoulli and Beta-Binomial outcomes).

The hierarchical models are sampled with Metropolis-within-Gibbs. Normal
full conditionals (the Gaussian model's effects, and ``mu`` everywhere) are
drawn exactly; the remaining blocks use component-wise random-walk
Metropolis with per-component step sizes tuned during warm-up.

Default hyperpriors: ``mu ~ N(0, 5^2)``, every ``tau`` and ``sigma`` half-normal
with scale 2.5, dispersion ``~ LogNormal(0, 1)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import betaln, expit

from .domain import History, TypeStructure

__all__ = [
    "BetaBernoulliState",
    "beta_bernoulli_update",
    "beta_bernoulli_state",
    "sample_theta_beta_bernoulli",
    "CellObservations",
    "HierarchicalPrior",
    "HierarchicalParams",
    "PosteriorDraws",
    "mcmc_sample_gaussian",
    "mcmc_sample_logit",
    "mcmc_sample_beta_binomial",
    "credible_interval",
    "effective_sample_size",
    "mc_standard_error",
    "BetaBernoulliModel",
    "HierarchicalModel",
]


# ---------------------------------------------------------------------------
# Beta-Bernoulli
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BetaBernoulliState:
    """Per-option Beta parameters.

    ``cells`` gives the parameter cell of each option. Options in the same
    cell always carry identical ``alpha``/``beta`` because an observation on
    any of them updates the whole cell.
    """

    alpha: np.ndarray
    beta: np.ndarray
    cells: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("alpha and beta must be 1-d arrays of equal length")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("alpha and beta must be positive")
        cells = np.arange(a.size) if self.cells is None else np.asarray(self.cells, dtype=np.int64)
        if cells.shape != a.shape:
            raise ValueError("cells must have one entry per option")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "cells", cells)

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)


def beta_bernoulli_state(type_structure: TypeStructure, alpha0: float = 1.0,
                         beta0: float = 1.0) -> BetaBernoulliState:
    """Prior state with ``Beta(alpha0, beta0)`` on every cell."""
    d = type_structure.d
    return BetaBernoulliState(np.full(d, float(alpha0)), np.full(d, float(beta0)),
                              type_structure.cell_of)


def beta_bernoulli_update(state: BetaBernoulliState, action, values) -> BetaBernoulliState:
    """Conjugate update with one period's revealed outcomes.

    ``values`` holds NaN for unobserved options; observed entries must be 0
    or 1. Successes and failures are added to every option in the cell of
    each observed option.
    """
    y = np.asarray(values, dtype=np.float64)
    obs = ~np.isnan(y)
    if action is not None:
        obs &= np.asarray(action) == 1
    yo = y[obs]
    if np.any((yo != 0.0) & (yo != 1.0)):
        raise ValueError("Beta-Bernoulli update needs binary outcomes")
    if not yo.size:
        return state
    cells = state.cells
    n_cells = int(cells.max()) + 1
    succ = np.bincount(cells[obs], weights=yo, minlength=n_cells)
    fail = np.bincount(cells[obs], weights=1.0 - yo, minlength=n_cells)
    return BetaBernoulliState(state.alpha + succ[cells], state.beta + fail[cells], cells)


def sample_theta_beta_bernoulli(state: BetaBernoulliState, rng: np.random.Generator) -> np.ndarray:
    """One Beta draw per cell, broadcast to the options of that cell."""
    uniq, first, inverse = np.unique(state.cells, return_index=True, return_inverse=True)
    draws = rng.beta(state.alpha[first], state.beta[first])
    return draws[inverse]


# ---------------------------------------------------------------------------
# Data for the hierarchical models
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CellObservations:
    """Flat list of observations tagged with their (u, v) cell."""

    n_u: int
    n_v: int
    cell: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cell, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.float64)
        if c.shape != y.shape or c.ndim != 1:
            raise ValueError("cell and y must be 1-d arrays of equal length")
        if c.size and (c.min() < 0 or c.max() >= self.n_u * self.n_v):
            raise ValueError("cell id out of range")
        object.__setattr__(self, "cell", c)
        object.__setattr__(self, "y", y)

    @classmethod
    def empty(cls, n_u: int, n_v: int) -> "CellObservations":
        return cls(n_u, n_v, np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def from_history(cls, history: History, type_structure: TypeStructure,
                     scale: float = 1.0) -> "CellObservations":
        """Observed outcomes of ``history``; values are multiplied by ``scale``."""
        if history.d != type_structure.d:
            raise ValueError(f"history has d={history.d}, type structure has d={type_structure.d}")
        vals = history.values
        t_idx, j_idx = np.nonzero(~np.isnan(vals))
        return cls(type_structure.n_u, type_structure.n_v,
                   type_structure.cell_of[j_idx], vals[t_idx, j_idx] * scale)

    def extended(self, cell, y) -> "CellObservations":
        return CellObservations(self.n_u, self.n_v,
                                np.concatenate([self.cell, np.asarray(cell, dtype=np.int64)]),
                                np.concatenate([self.y, np.asarray(y, dtype=np.float64)]))

    @property
    def n_cells(self) -> int:
        return self.n_u * self.n_v

    def counts(self) -> np.ndarray:
        return np.bincount(self.cell, minlength=self.n_cells).astype(np.float64)

    def sums(self) -> np.ndarray:
        return np.bincount(self.cell, weights=self.y, minlength=self.n_cells)

    def sums_sq(self) -> np.ndarray:
        return np.bincount(self.cell, weights=self.y ** 2, minlength=self.n_cells)


# ---------------------------------------------------------------------------
# Hierarchical prior and parameters
# ---------------------------------------------------------------------------
_FIXABLE = ("mu", "tau_u_sq", "tau_v_sq", "tau_uv_sq", "sigma_sq", "dispersion")


@dataclass(frozen=True)
class HierarchicalPrior:
    """Hyperpriors and structural switches for the hierarchical models.

    ``fixed`` pins any of ``mu, tau_u_sq, tau_v_sq, tau_uv_sq, sigma_sq,
    dispersion`` to a constant. ``use_gamma_u=False`` (or ``use_gamma_v``)
    drops that main effect, i.e. holds it at zero.
    """

    mu_sd: float = 5.0
    tau_scale: float = 2.5
    sigma_scale: float = 2.5
    dispersion_log_mean: float = 0.0
    dispersion_log_sd: float = 1.0
    y_max: int = 1
    use_gamma_u: bool = True
    use_gamma_v: bool = True
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        bad = set(self.fixed) - set(_FIXABLE)
        if bad:
            raise ValueError(f"cannot fix unknown hyperparameters {sorted(bad)}")
        for k, v in self.fixed.items():
            if k != "mu" and not v > 0:
                raise ValueError(f"fixed {k} must be positive")
        if self.y_max < 1:
            raise ValueError("y_max must be a positive integer")


@dataclass
class HierarchicalParams:
    """One state of the hierarchical chain."""

    gamma_u: np.ndarray
    gamma_v: np.ndarray
    gamma_uv: np.ndarray
    mu: float
    tau_u_sq: float
    tau_v_sq: float
    tau_uv_sq: float
    sigma_sq: float = 1.0
    dispersion: float = 1.0
    y_bar: int = 1

    def eta(self) -> np.ndarray:
        """Linear predictor per cell, flattened row-major."""
        return (self.gamma_u[:, None] + self.gamma_v[None, :] + self.gamma_uv).ravel()

    def copy(self) -> "HierarchicalParams":
        return replace(self, gamma_u=self.gamma_u.copy(), gamma_v=self.gamma_v.copy(),
                       gamma_uv=self.gamma_uv.copy())


@dataclass
class PosteriorDraws:
    """Posterior draws of option means.

    ``draws`` has shape ``(n_draws, d)``; ``cell_draws`` has shape
    ``(n_draws, n_cells)``. For the Gaussian model these are unclipped and
    may leave [0, 1].
    """

    draws: np.ndarray
    model_tag: str
    chain_diagnostics: dict = field(default_factory=dict)
    cell_draws: np.ndarray | None = None
    traces: dict = field(default_factory=dict)
    final_state: HierarchicalParams | None = None

    def __len__(self) -> int:
        return self.draws.shape[0]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["draw_index", "option_index", "theta"])
        for i, row in enumerate(self.draws):
            for j, x in enumerate(row):
                w.writerow([i + 1, j + 1, repr(float(x))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def diagnostics_text(self) -> str:
        lines = [f"model = {self.model_tag}", f"n_draws = {len(self)}"]
        for k in sorted(self.chain_diagnostics):
            lines.append(f"{k} = {self.chain_diagnostics[k]!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# MCMC diagnostics
# ---------------------------------------------------------------------------
def effective_sample_size(x) -> float:
    """ESS from the autocorrelation function (Geyer initial positive sequence)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    pairs = acf[: n - 1 - (n - 1) % 2].reshape(-1, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    k = neg[0] if neg.size else pairs.size
    # monotone sequence estimator
    p = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * p.sum()
    return float(n / max(tau, 1.0 / n))


def mc_standard_error(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / np.sqrt(effective_sample_size(x)))


# ---------------------------------------------------------------------------
# The sampler
# ---------------------------------------------------------------------------
def _log1pexp(x):
    return np.logaddexp(0.0, x)


class _HierarchicalChain:
    """Metropolis-within-Gibbs for one of the three outcome families."""

    ADAPT_WINDOW = 50
    TARGET_ACCEPT = 0.35

    def __init__(self, family: str, obs: CellObservations, prior: HierarchicalPrior,
                 rng: np.random.Generator, init: HierarchicalParams | None = None):
        self.family = family
        self.prior = prior
        self.rng = rng
        self.n_u, self.n_v = obs.n_u, obs.n_v
        self.n_cells = obs.n_cells
        self.n = obs.counts()
        self.s = obs.sums()
        self.n_obs = int(obs.y.size)
        if family == "gaussian":
            self.ss = obs.sums_sq()
        elif family == "logit":
            if np.any((obs.y != 0) & (obs.y != 1)):
                raise ValueError("logit model needs binary outcomes")
        elif family == "beta_binomial":
            ybar = prior.y_max
            yi = np.rint(obs.y)
            if np.any(np.abs(obs.y - yi) > 1e-9) or np.any((yi < 0) | (yi > ybar)):
                raise ValueError(f"beta-binomial outcomes must be integers in 0..{ybar}")
            hist = np.zeros((self.n_cells, ybar + 1))
            np.add.at(hist, (obs.cell, yi.astype(np.int64)), 1.0)
            self.hist = hist
            self.hist_rows = np.flatnonzero(hist.sum(axis=1) > 0)
            self.yvals = np.arange(ybar + 1, dtype=np.float64)
        else:
            raise ValueError(f"unknown family {family!r}")
        self.state = init.copy() if init is not None else self._initial_state()
        self._apply_fixed(self.state)
        # per-component log step sizes and acceptance counters
        self.log_step = {
            "gamma_u": np.full(self.n_u, np.log(0.5)),
            "gamma_v": np.full(self.n_v, np.log(0.5)),
            "gamma_uv": np.full(self.n_cells, np.log(0.5)),
            "tau_u_sq": np.array([np.log(0.5)]),
            "tau_v_sq": np.array([np.log(0.5)]),
            "tau_uv_sq": np.array([np.log(0.5)]),
            "sigma_sq": np.array([np.log(0.3)]),
            "dispersion": np.array([np.log(0.5)]),
        }
        self.accepts = {k: np.zeros_like(v) for k, v in self.log_step.items()}
        self.tries = {k: 0 for k in self.log_step}

    # -- setup -----------------------------------------------------------
    def _initial_state(self) -> HierarchicalParams:
        return HierarchicalParams(
            gamma_u=np.zeros(self.n_u), gamma_v=np.zeros(self.n_v),
            gamma_uv=np.zeros((self.n_u, self.n_v)), mu=0.0,
            tau_u_sq=1.0, tau_v_sq=1.0, tau_uv_sq=1.0, sigma_sq=1.0,
            dispersion=float(np.exp(self.prior.dispersion_log_mean)), y_bar=self.prior.y_max)

    def _apply_fixed(self, st: HierarchicalParams):
        for k, v in self.prior.fixed.items():
            setattr(st, k, float(v))
        if not self.prior.use_gamma_u:
            st.gamma_u[:] = 0.0
        if not self.prior.use_gamma_v:
            st.gamma_v[:] = 0.0
        st.y_bar = self.prior.y_max

    # -- likelihood --------------------------------------------------------
    def cell_loglik(self, eta: np.ndarray, st: HierarchicalParams) -> np.ndarray:
        """Log likelihood per cell as a function of the linear predictor."""
        if self.family == "logit":
            return self.s * eta - self.n * _log1pexp(eta)
        if self.family == "gaussian":
            return -(self.ss - 2.0 * eta * self.s + self.n * eta ** 2) / (2.0 * st.sigma_sq)
        out = np.zeros(self.n_cells)
        rows = self.hist_rows
        if rows.size:
            th = expit(eta[rows])
            a = (st.dispersion * th)[:, None]
            b = (st.dispersion * (1.0 - th))[:, None]
            ybar = self.prior.y_max
            y = self.yvals[None, :]
            h = self.hist[rows]
            terms = betaln(y + a, ybar - y + b) - betaln(a, b)
            out[rows] = (h * terms).sum(axis=1)
        return out

    # -- generic component-wise random walk ---------------------------------
    def _rw(self, name, current, logpost, adapt):
        """Vectorized random-walk step for independent components."""
        step = np.exp(self.log_step[name])
        z = self.rng.standard_normal(current.shape)
        u = np.log(self.rng.random(current.shape))
        prop = current + step * z
        lp_cur = logpost(current)
        lp_prop = logpost(prop)
        acc = u < (lp_prop - lp_cur)
        self.accepts[name] += acc
        self.tries[name] += 1
        return np.where(acc, prop, current)

    def _adapt(self, sweep):
        if (sweep + 1) % self.ADAPT_WINDOW:
            return
        for k in self.log_step:
            if self.tries[k]:
                rate = self.accepts[k] / self.tries[k]
                self.log_step[k] += np.where(rate > self.TARGET_ACCEPT, 1.0, -1.0) * \
                    np.minimum(0.5, np.abs(rate - self.TARGET_ACCEPT) * 2.0)
                np.clip(self.log_step[k], np.log(1e-4), np.log(20.0), out=self.log_step[k])
        self._reset_counters()

    def _reset_counters(self):
        for k in self.accepts:
            self.accepts[k][:] = 0
            self.tries[k] = 0

    # -- block updates ------------------------------------------------------
    def _update_effects_gaussian(self, st: HierarchicalParams):
        rng = self.rng
        n = self.n.reshape(self.n_u, self.n_v)
        s = self.s.reshape(self.n_u, self.n_v)
        sig2 = st.sigma_sq
        if self.prior.use_gamma_u:
            resid = (s - n * (st.gamma_v[None, :] + st.gamma_uv)).sum(axis=1)
            prec = 1.0 / st.tau_u_sq + n.sum(axis=1) / sig2
            mean = (resid / sig2) / prec
            st.gamma_u = mean + rng.standard_normal(self.n_u) / np.sqrt(prec)
        if self.prior.use_gamma_v:
            resid = (s - n * (st.gamma_u[:, None] + st.gamma_uv)).sum(axis=0)
            prec = 1.0 / st.tau_v_sq + n.sum(axis=0) / sig2
            mean = (resid / sig2) / prec
            st.gamma_v = mean + rng.standard_normal(self.n_v) / np.sqrt(prec)
        resid = s - n * (st.gamma_u[:, None] + st.gamma_v[None, :])
        prec = 1.0 / st.tau_uv_sq + n / sig2
        mean = (st.mu / st.tau_uv_sq + resid / sig2) / prec
        st.gamma_uv = mean + rng.standard_normal((self.n_u, self.n_v)) / np.sqrt(prec)

    def _update_effects_mh(self, st: HierarchicalParams, adapt: bool):
        nu, nv = self.n_u, self.n_v
        if self.prior.use_gamma_u:
            base = (st.gamma_v[None, :] + st.gamma_uv)

            def lp_u(g):
                ll = self.cell_loglik((g[:, None] + base).ravel(), st).reshape(nu, nv).sum(axis=1)
                return ll - g ** 2 / (2.0 * st.tau_u_sq)

            st.gamma_u = self._rw("gamma_u", st.gamma_u, lp_u, adapt)
        if self.prior.use_gamma_v:
            base = (st.gamma_u[:, None] + st.gamma_uv)

            def lp_v(g):
                ll = self.cell_loglik((base + g[None, :]).ravel(), st).reshape(nu, nv).sum(axis=0)
                return ll - g ** 2 / (2.0 * st.tau_v_sq)

            st.gamma_v = self._rw("gamma_v", st.gamma_v, lp_v, adapt)
        base = (st.gamma_u[:, None] + st.gamma_v[None, :]).ravel()

        def lp_uv(g):
            return self.cell_loglik(base + g, st) - (g - st.mu) ** 2 / (2.0 * st.tau_uv_sq)

        st.gamma_uv = self._rw("gamma_uv", st.gamma_uv.ravel(), lp_uv, adapt).reshape(nu, nv)

    def _update_mu(self, st: HierarchicalParams):
        if "mu" in self.prior.fixed:
            return
        prec = 1.0 / self.prior.mu_sd ** 2 + self.n_cells / st.tau_uv_sq
        mean = (st.gamma_uv.sum() / st.tau_uv_sq) / prec
        st.mu = float(mean + self.rng.standard_normal() / np.sqrt(prec))

    def _update_scale(self, st, name, values, scale, adapt):
        """Random walk on log(sd) for a variance with a half-normal sd prior.

        ``values`` are the zero-mean normal quantities the variance governs.
        """
        if name in self.prior.fixed:
            return
        k = values.size
        ssq = float(values @ values)

        def lp(log_sd):
            sd2 = np.exp(2.0 * log_sd)
            # N(values | 0, sd^2) * HalfNormal(sd | scale) * |d sd / d log sd|
            return -k * log_sd - ssq / (2.0 * sd2) - sd2 / (2.0 * scale ** 2) + log_sd

        cur = np.array([0.5 * np.log(getattr(st, name))])
        new = self._rw(name, cur, lp, adapt)
        setattr(st, name, float(np.exp(2.0 * new[0])))

    def _update_sigma(self, st, adapt):
        if "sigma_sq" in self.prior.fixed:
            return
        eta = st.eta()
        ssr = float((self.ss - 2.0 * eta * self.s + self.n * eta ** 2).sum())
        ntot = self.n.sum()
        scale = self.prior.sigma_scale

        def lp(log_sd):
            sd2 = np.exp(2.0 * log_sd)
            return -ntot * log_sd - ssr / (2.0 * sd2) - sd2 / (2.0 * scale ** 2) + log_sd

        cur = np.array([0.5 * np.log(st.sigma_sq)])
        new = self._rw("sigma_sq", cur, lp, adapt)
        st.sigma_sq = float(np.exp(2.0 * new[0]))

    def _update_dispersion(self, st, adapt):
        if "dispersion" in self.prior.fixed:
            return
        eta = st.eta()
        m0, sd = self.prior.dispersion_log_mean, self.prior.dispersion_log_sd

        def lp(logm):
            trial = replace(st, dispersion=float(np.exp(logm[0])))
            # log-normal prior on m, expressed on log m (Jacobian cancels the 1/m)
            return np.array([self.cell_loglik(eta, trial).sum() - (logm[0] - m0) ** 2 / (2 * sd ** 2)])

        cur = np.array([np.log(st.dispersion)])
        new = self._rw("dispersion", cur, lp, adapt)
        st.dispersion = float(np.exp(new[0]))

    def sweep(self, adapt: bool):
        st = self.state
        if self.family == "gaussian":
            self._update_effects_gaussian(st)
        else:
            self._update_effects_mh(st, adapt)
        self._update_mu(st)
        if self.prior.use_gamma_u:
            self._update_scale(st, "tau_u_sq", st.gamma_u, self.prior.tau_scale, adapt)
        if self.prior.use_gamma_v:
            self._update_scale(st, "tau_v_sq", st.gamma_v, self.prior.tau_scale, adapt)
        self._update_scale(st, "tau_uv_sq", (st.gamma_uv - st.mu).ravel(), self.prior.tau_scale, adapt)
        if self.family == "gaussian":
            self._update_sigma(st, adapt)
        elif self.family == "beta_binomial":
            self._update_dispersion(st, adapt)

    def run(self, n_draws: int, warmup: int, thin: int):
        for i in range(warmup):
            self.sweep(adapt=True)
            self._adapt(i)
        self._reset_counters()
        eta = np.empty((n_draws, self.n_cells))
        traces = {k: np.empty(n_draws) for k in ("mu", "tau_u_sq", "tau_v_sq", "tau_uv_sq",
                                                  "sigma_sq", "dispersion")}
        for i in range(n_draws):
            for _ in range(thin):
                self.sweep(adapt=False)
            eta[i] = self.state.eta()
            for k in traces:
                traces[k][i] = getattr(self.state, k)
        rates = {}
        for k, t in self.tries.items():
            if t:
                rates[f"accept_rate_{k}"] = float(np.mean(self.accepts[k] / t))
        return eta, traces, rates


def _prior_draws(family: str, prior: HierarchicalPrior, n_u: int, n_v: int, n_draws: int,
                 rng: np.random.Generator):
    """Direct simulation of the linear predictor from the prior."""
    fx = prior.fixed

    def scale_draw(name, scale):
        if name in fx:
            return np.full(n_draws, float(fx[name]))
        return (scale * np.abs(rng.standard_normal(n_draws))) ** 2

    mu = np.full(n_draws, float(fx["mu"])) if "mu" in fx else prior.mu_sd * rng.standard_normal(n_draws)
    tu = scale_draw("tau_u_sq", prior.tau_scale)
    tv = scale_draw("tau_v_sq", prior.tau_scale)
    tuv = scale_draw("tau_uv_sq", prior.tau_scale)
    gu = np.sqrt(tu)[:, None] * rng.standard_normal((n_draws, n_u))
    gv = np.sqrt(tv)[:, None] * rng.standard_normal((n_draws, n_v))
    if not prior.use_gamma_u:
        gu[:] = 0.0
    if not prior.use_gamma_v:
        gv[:] = 0.0
    guv = mu[:, None, None] + np.sqrt(tuv)[:, None, None] * rng.standard_normal((n_draws, n_u, n_v))
    eta = (gu[:, :, None] + gv[:, None, :] + guv).reshape(n_draws, n_u * n_v)
    traces = {"mu": mu, "tau_u_sq": tu, "tau_v_sq": tv, "tau_uv_sq": tuv}
    if family == "gaussian":
        traces["sigma_sq"] = scale_draw("sigma_sq", prior.sigma_scale)
    if family == "beta_binomial":
        traces["dispersion"] = (np.full(n_draws, float(fx["dispersion"])) if "dispersion" in fx else
                                np.exp(prior.dispersion_log_mean
                                       + prior.dispersion_log_sd * rng.standard_normal(n_draws)))
    return eta, traces


def _to_obs(data, type_structure, scale=1.0) -> CellObservations:
    if isinstance(data, CellObservations):
        return data
    if isinstance(data, History):
        if type_structure is None:
            raise ValueError("a TypeStructure is needed to read a History")
        return CellObservations.from_history(data, type_structure, scale=scale)
    raise TypeError(f"expected History or CellObservations, got {type(data).__name__}")


def _sample(family, tag, data, type_structure, prior, n_draws, rng, warmup, thin, init,
            prior_shortcut, scale=1.0):
    prior = prior or HierarchicalPrior()
    obs = _to_obs(data, type_structure, scale)
    if type_structure is not None and (type_structure.n_u, type_structure.n_v) != (obs.n_u, obs.n_v):
        raise ValueError("type structure and observations disagree on the cell grid")
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    final = None
    if obs.y.size == 0 and prior_shortcut:
        eta, traces = _prior_draws(family, prior, obs.n_u, obs.n_v, n_draws, rng)
        diag = {"prior_only": 1.0}
    else:
        chain = _HierarchicalChain(family, obs, prior, rng, init)
        eta, traces, diag = chain.run(n_draws, warmup, thin)
        final = chain.state.copy()
    cell_theta = eta if family == "gaussian" else expit(eta)
    if type_structure is not None:
        theta = cell_theta[:, type_structure.cell_of]
    else:
        theta = cell_theta
    diag["n_obs"] = float(obs.y.size)
    diag["ess_mean_theta"] = effective_sample_size(cell_theta.mean(axis=1))
    return PosteriorDraws(theta, tag, diag, cell_theta, traces, final)


def mcmc_sample_gaussian(data, type_structure: TypeStructure | None = None,
                         prior: HierarchicalPrior | None = None, n_draws: int = 1000,
                         rng: np.random.Generator | None = None, warmup: int = 2000,
                         thin: int = 1, init: HierarchicalParams | None = None,
                         prior_shortcut: bool = True) -> PosteriorDraws:
    """Posterior draws for the Gaussian-outcome hierarchical model.

    Returned ``theta`` values are the unclipped linear predictor.
    """
    rng = rng if rng is not None else np.random.default_rng()
    return _sample("gaussian", "gaussian_hier", data, type_structure, prior, n_draws, rng,
                   warmup, thin, init, prior_shortcut)


def mcmc_sample_logit(data, type_structure: TypeStructure | None = None,
                      prior: HierarchicalPrior | None = None, n_draws: int = 1000,
                      rng: np.random.Generator | None = None, warmup: int = 2000,
                      thin: int = 1, init: HierarchicalParams | None = None,
                      prior_shortcut: bool = True) -> PosteriorDraws:
    """Posterior draws for the Bernoulli-outcome (logit link) hierarchical model."""
    rng = rng if rng is not None else np.random.default_rng()
    return _sample("logit", "logit_hier", data, type_structure, prior, n_draws, rng,
                   warmup, thin, init, prior_shortcut)


def mcmc_sample_beta_binomial(data, type_structure: TypeStructure | None = None,
                              prior: HierarchicalPrior | None = None, n_draws: int = 1000,
                              rng: np.random.Generator | None = None, warmup: int = 2000,
                              thin: int = 1, init: HierarchicalParams | None = None,
                              prior_shortcut: bool = True) -> PosteriorDraws:
    """Posterior draws for the Beta-Binomial hierarchical model.

    Outcomes are counts in ``0..prior.y_max``. A :class:`History` stores
    them rescaled to [0, 1] and is multiplied back by ``y_max`` here.
    """
    rng = rng if rng is not None else np.random.default_rng()
    prior = prior or HierarchicalPrior()
    return _sample("beta_binomial", "beta_binomial_hier", data, type_structure, prior, n_draws,
                   rng, warmup, thin, init, prior_shortcut, scale=float(prior.y_max))


def credible_interval(draws, option: int, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed interval from the empirical quantiles of one option.

    ``option`` is a 0-based column index. Quantiles use linear interpolation.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    x = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least two draws")
    alpha = 1.0 - level
    lo, hi = np.quantile(x[:, option], [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Posterior models used by the Thompson loop
# ---------------------------------------------------------------------------
class BetaBernoulliModel:
    """Conjugate model; keeps its state in sync with a growing history."""

    tag = "beta_bernoulli"

    def __init__(self, type_structure: TypeStructure, alpha0: float = 1.0, beta0: float = 1.0):
        self.type_structure = type_structure
        self.alpha0 = float(alpha0)
        self.beta0 = float(beta0)
        self._hist = None
        self._seen = 0
        self._state = None

    @property
    def d(self) -> int:
        return self.type_structure.d

    def state_for(self, history: History) -> BetaBernoulliState:
        if history is not self._hist or len(history) < self._seen:
            self._hist = history
            self._seen = 0
            self._state = beta_bernoulli_state(self.type_structure, self.alpha0, self.beta0)
        for rec in history[self._seen:]:
            self._state = beta_bernoulli_update(self._state, rec.action, rec.values)
        self._seen = len(history)
        return self._state

    def sample(self, history: History, rng: np.random.Generator) -> np.ndarray:
        return sample_theta_beta_bernoulli(self.state_for(history), rng)

    def sample_cells(self, obs: CellObservations, rng: np.random.Generator) -> np.ndarray:
        succ = np.bincount(obs.cell, weights=obs.y, minlength=obs.n_cells)
        n = obs.counts()
        return rng.beta(self.alpha0 + succ, self.beta0 + n - succ)


class HierarchicalModel:
    """One of the hierarchical models, refit by MCMC.

    A fresh chain (warm-started from the previous fit) is run every
    ``refit_every`` calls; it yields ``refit_every`` draws which are consumed
    one per call until the next refit.
    """

    _samplers = {
        "gaussian_hier": mcmc_sample_gaussian,
        "logit_hier": mcmc_sample_logit,
        "beta_binomial_hier": mcmc_sample_beta_binomial,
    }

    def __init__(self, family: str, type_structure: TypeStructure,
                 prior: HierarchicalPrior | None = None, warmup: int = 2000, thin: int = 1,
                 refit_every: int = 1):
        if family not in self._samplers:
            raise ValueError(f"unknown hierarchical family {family!r}")
        if refit_every < 1:
            raise ValueError("refit_every must be at least 1")
        self.tag = family
        self.type_structure = type_structure
        self.prior = prior or HierarchicalPrior()
        self.warmup = warmup
        self.thin = thin
        self.refit_every = refit_every
        self._reset(None)

    @property
    def d(self) -> int:
        return self.type_structure.d

    def _reset(self, source):
        self._source = source
        self._pending: list[np.ndarray] = []
        self._init = None
        self.last_fit: PosteriorDraws | None = None

    def _next(self, data, ts, rng):
        if not self._pending:
            fit = self._samplers[self.tag](data, ts, self.prior, self.refit_every, rng,
                                           warmup=self.warmup, thin=self.thin, init=self._init)
            self.last_fit = fit
            self._init = fit.final_state
            self._pending = list(fit.cell_draws)
        return self._pending.pop(0)

    def sample_cells(self, obs: CellObservations, rng: np.random.Generator) -> np.ndarray:
        theta = self._next(obs, None, rng)
        return theta if self.tag != "gaussian_hier" else np.clip(theta, 0.0, 1.0)

    def sample(self, history: History, rng: np.random.Generator) -> np.ndarray:
        if history is not self._source:
            self._reset(history)
        theta = self._next(history, self.type_structure, rng)[self.type_structure.cell_of]
        return np.clip(theta, 0.0, 1.0)
