"""Exact argmax of ``<a, theta>`` over structured feasible sets.

Option layout for the two-sided variants is row-major: option ``i * r + c``
pairs left item ``i`` with right node ``c``.

Ties are broken deterministically everywhere: among optimal actions the one
whose sorted list of chosen option indices is lexicographically smallest
wins. Objective values within ``TIE_TOL`` of each other count as ties so
that summation-order rounding does not change the answer.

Multiple knapsack actions may leave items out. There ties are broken on the
per-item choice sequence (knapsack index per item, in item order, with
"left out" ranked after every knapsack). On complete packings this is the
same order as the general rule.
"""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, linear_sum_assignment, milp
from scipy.sparse import coo_matrix

__all__ = [
    "TIE_TOL",
    "InfeasibleError",
    "EnumerationLimitError",
    "TopM",
    "Assignment",
    "Capacitated",
    "MultipleKnapsack",
    "Explicit",
    "FeasibleSet",
    "solve",
    "solve_batch",
    "solve_top_m",
    "solve_assignment",
    "solve_capacitated",
    "solve_multiple_knapsack",
    "unassigned_items",
    "enumerate_feasible",
    "brute_force_argmax",
    "check_action",
    "lex_key",
]

TIE_TOL = 1e-9

# Validate every solver output when set (tests switch this on).
CHECK_SOLUTIONS = bool(os.environ.get("COMBI_BANDIT_DEBUG"))


class InfeasibleError(ValueError):
    """No action satisfies the constraints."""


class EnumerationLimitError(ValueError):
    """Enumeration would exceed the requested limit."""


@dataclass(frozen=True)
class TopM:
    d: int
    m: int

    def __post_init__(self):
        if not 1 <= self.m <= self.d:
            raise ValueError(f"TopM needs 1 <= m <= d, got m={self.m}, d={self.d}")


@dataclass(frozen=True)
class Assignment:
    """One-to-one matching of ``k`` left items to ``k`` right nodes."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("Assignment needs k >= 1")

    @property
    def d(self) -> int:
        return self.k * self.k

    @property
    def m(self) -> int:
        return self.k


@dataclass(frozen=True)
class Capacitated:
    """Many-to-one matching: ``n_items`` unit-demand items, node capacities."""

    n_items: int
    capacities: tuple

    def __post_init__(self):
        caps = tuple(int(c) for c in self.capacities)
        if any(c < 0 for c in caps) or not caps:
            raise ValueError("capacities must be a nonempty list of nonnegative integers")
        object.__setattr__(self, "capacities", caps)

    @property
    def n_nodes(self) -> int:
        return len(self.capacities)

    @property
    def d(self) -> int:
        return self.n_items * self.n_nodes

    @property
    def m(self) -> int:
        return self.n_items


@dataclass(frozen=True)
class MultipleKnapsack:
    """Items with integer weights packed into integer-capacity knapsacks."""

    weights: tuple
    capacities: tuple

    def __post_init__(self):
        w = tuple(self.weights)
        c = tuple(self.capacities)
        for x in w + c:
            if isinstance(x, float) and not float(x).is_integer():
                raise ValueError("weights and capacities must be integers")
        w = tuple(int(x) for x in w)
        c = tuple(int(x) for x in c)
        if any(x < 1 for x in w):
            raise ValueError("weights must be positive integers")
        if any(x < 0 for x in c) or not c:
            raise ValueError("capacities must be a nonempty list of nonnegative integers")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "capacities", c)

    @property
    def n_items(self) -> int:
        return len(self.weights)

    @property
    def n_nodes(self) -> int:
        return len(self.capacities)

    @property
    def d(self) -> int:
        return self.n_items * self.n_nodes

    @property
    def m(self) -> int:
        return self.n_items


@dataclass(frozen=True)
class Explicit:
    actions: tuple

    def __post_init__(self):
        acts = tuple(tuple(int(x) for x in a) for a in self.actions)
        if not acts:
            raise InfeasibleError("explicit feasible set is empty")
        d = len(acts[0])
        m = sum(acts[0])
        for a in acts:
            if len(a) != d or sum(a) != m or any(x not in (0, 1) for x in a):
                raise ValueError("explicit actions must be binary, equal length and equal size")
        object.__setattr__(self, "actions", acts)

    @property
    def d(self) -> int:
        return len(self.actions[0])

    @property
    def m(self) -> int:
        return sum(self.actions[0])


FeasibleSet = Union[TopM, Assignment, Capacitated, MultipleKnapsack, Explicit]


def lex_key(action) -> tuple:
    """Tie-breaking key: sorted chosen option indices."""
    return tuple(np.flatnonzero(np.asarray(action)).tolist())


def _check_theta(theta, d: int) -> np.ndarray:
    t = np.asarray(theta, dtype=np.float64)
    if t.shape != (d,):
        raise ValueError(f"theta has shape {t.shape}, expected ({d},)")
    if not np.all(np.isfinite(t)):
        raise ValueError("theta must be finite")
    return t


# ---------------------------------------------------------------------------
# top-m
# ---------------------------------------------------------------------------
def solve_top_m(theta_hat, m: int) -> np.ndarray:
    """Indicator of the ``m`` largest entries; ties go to the lowest index."""
    t = np.asarray(theta_hat, dtype=np.float64)
    d = t.size
    if not 1 <= m <= d:
        raise ValueError(f"need 1 <= m <= d, got m={m}, d={d}")
    a = np.zeros(d, dtype=np.int8)
    a[np.argsort(-t, kind="stable")[:m]] = 1
    return a


# ---------------------------------------------------------------------------
# assignment / capacitated: slot expansion + Hungarian, lexicographic fixing
# ---------------------------------------------------------------------------
def _best_assignment_value(values: np.ndarray, caps: np.ndarray) -> float:
    n = values.shape[0]
    if n == 0:
        return 0.0
    slots = np.repeat(np.arange(caps.size), caps)
    if slots.size < n:
        raise InfeasibleError(f"{n} items but only {slots.size} slots")
    w = values[:, slots]
    rows, cols = linear_sum_assignment(w, maximize=True)
    return float(w[rows, cols].sum())


def _lex_assignment(values: np.ndarray, caps) -> np.ndarray:
    """Max-value assignment of every row to a node, lexicographic ties.

    Capacitated assignment reduces to a rectangular assignment problem by
    giving node ``c`` ``caps[c]`` identical slots (equivalent to the unit
    demand min-cost-flow formulation). The optimal value comes from the
    Hungarian method; rows are then fixed one at a time to the smallest
    node that still admits an optimal completion.
    """
    n, r = values.shape
    caps = np.array(caps, dtype=np.int64)
    best = _best_assignment_value(values, caps)
    choice = np.empty(n, dtype=np.int64)
    acc = 0.0
    for i in range(n):
        for c in range(r):
            if caps[c] == 0:
                continue
            caps[c] -= 1
            try:
                rest = _best_assignment_value(values[i + 1:], caps)
            except InfeasibleError:
                caps[c] += 1
                continue
            if acc + values[i, c] + rest >= best - TIE_TOL:
                choice[i] = c
                acc += values[i, c]
                break
            caps[c] += 1
        else:  # pragma: no cover - the optimum always admits a completion
            raise RuntimeError("lexicographic fixing failed")
    a = np.zeros(n * r, dtype=np.int8)
    a[np.arange(n) * r + choice] = 1
    return a


def solve_assignment(theta_hat) -> np.ndarray:
    """Maximum-value perfect matching for a square ``k x k`` value matrix.

    Accepts the matrix or its row-major flattening of length ``k*k``.
    """
    w = np.asarray(theta_hat, dtype=np.float64)
    if w.ndim == 1:
        k = math.isqrt(w.size)
        if k * k != w.size:
            raise ValueError(f"flat value vector of length {w.size} is not a square")
        w = w.reshape(k, k)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"assignment needs a square matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("values must be finite")
    return _lex_assignment(w, np.ones(w.shape[1], dtype=np.int64))


def solve_capacitated(theta_hat, fs: Capacitated) -> np.ndarray:
    t = _check_theta(theta_hat, fs.d)
    if sum(fs.capacities) < fs.n_items:
        raise InfeasibleError(
            f"total capacity {sum(fs.capacities)} is below the {fs.n_items} items")
    return _lex_assignment(t.reshape(fs.n_items, fs.n_nodes), fs.capacities)


# ---------------------------------------------------------------------------
# multiple knapsack: depth-first branch and bound
# ---------------------------------------------------------------------------
def _mkp_bound(v, w, rem, i, allow_skip):
    """Upper bound on the value obtainable from items ``i..n-1``.

    Each item is credited with its best value over knapsacks it still fits
    in, and items are packed fractionally into the pooled remaining capacity
    (greedy by value density). Returns ``-inf`` when a full assignment is
    required and provably impossible.
    """
    vi = v[i:]
    wi = w[i:]
    if vi.shape[0] == 0:
        return 0.0
    fits = rem[None, :] >= wi[:, None]
    best = np.where(fits, vi, -np.inf).max(axis=1)
    total = float(rem.sum())
    if not allow_skip:
        if np.isneginf(best).any() or wi.sum() > total:
            return -np.inf
        return float(best.sum())
    best = np.maximum(best, 0.0)
    order = np.argsort(-best / wi, kind="stable")
    cum = np.cumsum(wi[order])
    k = int(np.searchsorted(cum, total, side="right"))
    ub = float(best[order[:k]].sum())
    if k < order.size:
        used = cum[k - 1] if k > 0 else 0
        j = order[k]
        ub += best[j] * (total - used) / wi[j]
    return ub


def _mkp_search(v, w, caps, allow_skip):
    n, r = v.shape
    rem = np.array(caps, dtype=np.int64)
    choice = np.full(n, -1, dtype=np.int64)
    best = {"val": -np.inf, "choice": None}

    def dfs(i, val):
        if i == n:
            if val > best["val"] + TIE_TOL:
                best["val"] = val
                best["choice"] = choice.copy()
            return
        ub = _mkp_bound(v, w, rem, i, allow_skip)
        if val + ub <= best["val"] + TIE_TOL:
            return
        wi = w[i]
        for c in range(r):
            if rem[c] >= wi:
                rem[c] -= wi
                choice[i] = c
                dfs(i + 1, val + v[i, c])
                rem[c] += wi
        if allow_skip:
            choice[i] = -1
            dfs(i + 1, val)

    dfs(0, 0.0)
    return best["choice"]


# Instances up to this many items and knapsacks use the branch and bound,
# which returns the lexicographically smallest optimum. Larger ones go to
# the HiGHS MILP solver.
MKP_BNB_MAX_ITEMS = 10
MKP_BNB_MAX_NODES = 4
# Method used when ``solve_multiple_knapsack`` is called without one.
MKP_DEFAULT_METHOD = "auto"


def _mkp_milp(v, w, caps, allow_skip):
    n, r = v.shape
    rows = np.repeat(np.arange(n), r)
    item_rows = coo_matrix((np.ones(n * r), (rows, np.arange(n * r))), shape=(n, n * r))
    cap_rows = coo_matrix((np.repeat(w, r).astype(np.float64),
                           (np.tile(np.arange(r), n), np.arange(n * r))), shape=(r, n * r))
    lo = 0.0 if allow_skip else 1.0
    cons = [LinearConstraint(item_rows, lo, 1.0), LinearConstraint(cap_rows, -np.inf, caps)]
    # forbid pairs that cannot fit at all
    upper = (w[:, None] <= caps[None, :]).astype(np.float64).ravel()
    res = milp(-v.ravel(), constraints=cons, integrality=np.ones(n * r),
               bounds=Bounds(np.zeros(n * r), upper),
               options={"mip_rel_gap": 0.0, "presolve": True})
    if res.x is None:
        return None
    x = res.x.reshape(n, r) > 0.5
    choice = np.where(x.any(axis=1), x.argmax(axis=1), -1)
    return choice


def _mkp_canonical(choice, v, w, r):
    """Among items with equal weight and equal value rows, hand the sorted
    knapsack choices out in item order (skips last). Value and feasibility
    are unchanged; the result is the lexicographically smallest relabelling."""
    groups: dict = {}
    for i in range(len(w)):
        groups.setdefault((int(w[i]), v[i].tobytes()), []).append(i)
    out = choice.copy()
    for members in groups.values():
        if len(members) > 1:
            picks = sorted(r if choice[i] < 0 else int(choice[i]) for i in members)
            for i, c in zip(members, picks):
                out[i] = -1 if c == r else c
    return out


def solve_multiple_knapsack(theta_hat, fs: MultipleKnapsack, method: str | None = None) -> np.ndarray:
    """Exact multiple knapsack.

    If every item can be packed, the best complete packing is returned.
    Otherwise the best partial packing is returned; items left out show up
    as all-zero rows (see :func:`unassigned_items`).

    Parameters
    ----------
    method : {"auto", "bnb", "milp"}, optional
        ``"bnb"`` is a depth-first branch and bound with a pooled fractional
        bound and gives the lexicographically smallest optimum. ``"milp"``
        calls HiGHS with a zero optimality gap; ties between structurally
        different optima are then broken by the MILP solver, while ties
        among interchangeable items are still resolved lexicographically.
        ``"auto"`` picks the branch and bound for small instances.
        Defaults to ``MKP_DEFAULT_METHOD``.
    """
    t = _check_theta(theta_hat, fs.d)
    n, r = fs.n_items, fs.n_nodes
    a = np.zeros(fs.d, dtype=np.int8)
    if n == 0:
        return a
    method = method or MKP_DEFAULT_METHOD
    if method == "auto":
        method = "bnb" if n <= MKP_BNB_MAX_ITEMS and r <= MKP_BNB_MAX_NODES else "milp"
    if method not in ("bnb", "milp"):
        raise ValueError(f"unknown method {method!r}")
    search = _mkp_search if method == "bnb" else _mkp_milp
    v = t.reshape(n, r)
    w = np.asarray(fs.weights, dtype=np.int64)
    caps = np.asarray(fs.capacities, dtype=np.int64)
    choice = None
    if w.sum() <= caps.sum():
        choice = search(v, w, caps, allow_skip=False)
    if choice is None:
        choice = search(v, w, caps, allow_skip=True)
    choice = _mkp_canonical(choice, v, w, r)
    placed = choice >= 0
    a[np.flatnonzero(placed) * r + choice[placed]] = 1
    return a


def unassigned_items(action, fs: MultipleKnapsack | Capacitated) -> np.ndarray:
    """Indices of items not placed by ``action``."""
    rows = np.asarray(action).reshape(fs.n_items, fs.n_nodes).sum(axis=1)
    return np.flatnonzero(rows == 0)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------
def solve(theta_hat, fs: FeasibleSet) -> np.ndarray:
    """Exact argmax of ``<a, theta_hat>`` over ``fs``."""
    if isinstance(fs, TopM):
        a = solve_top_m(_check_theta(theta_hat, fs.d), fs.m)
    elif isinstance(fs, Assignment):
        a = solve_assignment(_check_theta(theta_hat, fs.d))
    elif isinstance(fs, Capacitated):
        a = solve_capacitated(theta_hat, fs)
    elif isinstance(fs, MultipleKnapsack):
        a = solve_multiple_knapsack(theta_hat, fs)
    elif isinstance(fs, Explicit):
        t = _check_theta(theta_hat, fs.d)
        acts = np.asarray(fs.actions, dtype=np.int8)
        a = _lex_best(acts, acts @ t)
    else:
        raise TypeError(f"unsupported feasible set {type(fs).__name__}")
    if CHECK_SOLUTIONS:
        problems = check_action(a, fs)
        if problems:
            raise AssertionError(f"solver returned an invalid action: {problems}")
    return a


@lru_cache(maxsize=32)
def _action_matrix(fs) -> np.ndarray:
    return _enumerate_array(fs, limit=5000)


def solve_batch(thetas, fs: FeasibleSet) -> np.ndarray:
    """Row-wise argmax for a ``(R, d)`` stack of parameter draws.

    Top-m and small enumerable sets are vectorized. Exact float ties fall to
    the lexicographically first action; ties within ``TIE_TOL`` that are not
    exact are not merged here, which only matters for non-continuous draws.
    """
    th = np.asarray(thetas, dtype=np.float64)
    R, d = th.shape
    if d != fs.d:
        raise ValueError(f"thetas have {d} columns, feasible set has d={fs.d}")
    if isinstance(fs, TopM):
        idx = np.argsort(-th, axis=1, kind="stable")[:, : fs.m]
        out = np.zeros((R, d), dtype=np.int8)
        np.put_along_axis(out, idx, 1, axis=1)
        return out
    if isinstance(fs, (Assignment, Explicit)):
        try:
            acts = _action_matrix(fs)
        except EnumerationLimitError:
            acts = None
        if acts is not None:
            return acts[np.argmax(th @ acts.T.astype(np.float64), axis=1)]
    return np.stack([solve(row, fs) for row in th])


# ---------------------------------------------------------------------------
# enumeration and brute force oracles
# ---------------------------------------------------------------------------
def _vec(d, idx) -> tuple:
    a = [0] * d
    for j in idx:
        a[j] = 1
    return tuple(a)


@lru_cache(maxsize=16)
def _radix_digits(n: int, base: int) -> np.ndarray:
    # first item most significant -> rows come out in lexicographic order
    codes = np.arange(base ** n, dtype=np.int64)
    digits = (codes[:, None] // base ** np.arange(n - 1, -1, -1)[None, :]) % base
    digits.setflags(write=False)
    return digits


def _enumerate_array(fs: FeasibleSet, limit: int) -> np.ndarray:
    if isinstance(fs, TopM):
        if math.comb(fs.d, fs.m) > limit:
            raise EnumerationLimitError(f"C({fs.d},{fs.m}) exceeds {limit}")
        idx = np.array(list(itertools.combinations(range(fs.d), fs.m)), dtype=np.int64)
        out = np.zeros((idx.shape[0], fs.d), dtype=np.int8)
        np.put_along_axis(out, idx, 1, axis=1)
        return out
    if isinstance(fs, Assignment):
        k = fs.k
        if math.factorial(k) > limit:
            raise EnumerationLimitError(f"{k}! exceeds {limit}")
        perms = np.array(list(itertools.permutations(range(k))), dtype=np.int64)
        out = np.zeros((perms.shape[0], fs.d), dtype=np.int8)
        np.put_along_axis(out, np.arange(k) * k + perms, 1, axis=1)
        return out
    if isinstance(fs, (Capacitated, MultipleKnapsack)):
        n, r = fs.n_items, fs.n_nodes
        caps = np.asarray(fs.capacities, dtype=np.int64)
        if isinstance(fs, Capacitated):
            w = np.ones(n, dtype=np.int64)
            base = r
        else:
            w = np.asarray(fs.weights, dtype=np.int64)
            base = r + 1  # digit r means "left out"
        if n == 0:
            return np.zeros((1, 0), dtype=np.int8)
        if base ** n > 50 * max(limit, 1) + 10**6:
            raise EnumerationLimitError(f"{base}^{n} candidate assignments")
        digits = _radix_digits(n, base)
        load = np.stack([(digits == c).astype(np.int64) @ w for c in range(r)], axis=1)
        digits = digits[np.all(load <= caps[None, :], axis=1)]
        if digits.shape[0] > limit:
            raise EnumerationLimitError(f"more than {limit} feasible actions")
        out = np.zeros((digits.shape[0], n * r + 1), dtype=np.int8)
        cols = np.where(digits < r, np.arange(n)[None, :] * r + digits, n * r)
        np.put_along_axis(out, cols, 1, axis=1)
        return out[:, : n * r]
    if isinstance(fs, Explicit):
        if len(fs.actions) > limit:
            raise EnumerationLimitError(f"{len(fs.actions)} actions exceed {limit}")
        return np.asarray(fs.actions, dtype=np.int8)
    raise TypeError(f"unsupported feasible set {type(fs).__name__}")


def enumerate_feasible(fs: FeasibleSet, limit: int = 100_000) -> list[tuple]:
    """Every feasible action, in lexicographic order of chosen indices.

    For :class:`MultipleKnapsack` this includes partial packings (items may
    be left out), since those are the fallback when no full packing exists.
    """
    return [tuple(int(x) for x in row) for row in _enumerate_array(fs, limit)]


def _lex_best(acts: np.ndarray, values: np.ndarray, key=None) -> np.ndarray:
    top = values.max()
    cand = np.flatnonzero(values >= top - TIE_TOL)
    key = key or lex_key
    best = min(cand, key=lambda i: key(acts[i]))
    return acts[best].copy()


def _knapsack_key(n: int, r: int):
    def key(action):
        rows = np.asarray(action).reshape(n, r)
        return tuple(np.where(rows.any(axis=1), rows.argmax(axis=1), r).tolist())
    return key


def brute_force_argmax(theta, fs: FeasibleSet, limit: int = 100_000) -> tuple[np.ndarray, float]:
    """Enumeration oracle returning ``(action, value)`` with the same
    tie-breaking and knapsack fallback rules as the specialized solvers."""
    t = _check_theta(theta, fs.d)
    acts = _enumerate_array(fs, limit)
    if acts.shape[0] == 0:
        raise InfeasibleError("no feasible action")
    key = None
    if isinstance(fs, MultipleKnapsack):
        full = acts.sum(axis=1) == fs.n_items
        if full.any():
            acts = acts[full]
        key = _knapsack_key(fs.n_items, fs.n_nodes)
    a = _lex_best(acts, acts.astype(np.float64) @ t, key)
    return a, float(a @ t)


def check_action(action, fs: FeasibleSet) -> list[str]:
    """List of constraint violations for ``action`` (empty when valid)."""
    a = np.asarray(action)
    problems: list[str] = []
    if a.shape != (fs.d,):
        return [f"action has shape {a.shape}, expected ({fs.d},)"]
    if not np.all((a == 0) | (a == 1)):
        return ["action is not binary"]
    if isinstance(fs, (TopM, Assignment, Capacitated, Explicit)) and int(a.sum()) != fs.m:
        problems.append(f"action selects {int(a.sum())} options, expected {fs.m}")
    if isinstance(fs, Assignment):
        mat = a.reshape(fs.k, fs.k)
        if not (np.all(mat.sum(0) == 1) and np.all(mat.sum(1) == 1)):
            problems.append("not a perfect matching")
    elif isinstance(fs, (Capacitated, MultipleKnapsack)):
        mat = a.reshape(fs.n_items, fs.n_nodes)
        if np.any(mat.sum(axis=1) > 1):
            problems.append("an item is assigned more than once")
        w = np.ones(fs.n_items) if isinstance(fs, Capacitated) else np.asarray(fs.weights)
        load = w @ mat
        over = np.flatnonzero(load > np.asarray(fs.capacities))
        if over.size:
            problems.append(f"capacity exceeded at nodes {over.tolist()}")
        if isinstance(fs, Capacitated) and np.any(mat.sum(axis=1) == 0):
            problems.append("an item is unassigned")
    elif isinstance(fs, Explicit):
        if tuple(int(x) for x in a) not in set(fs.actions):
            problems.append("action is not in the explicit list")
    return problems
