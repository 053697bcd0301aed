"""Core value types: actions, outcomes, histories and option type structure.

Options are indexed ``0..d-1`` inside the library. Files written for humans
(history CSVs, case files) use 1-based option indices.

Unobserved outcomes are stored as ``NaN``. A zero is a real observation and
is never used as a placeholder for "not chosen".
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TypeStructure",
    "Record",
    "History",
    "ScenarioConfig",
    "MODEL_FAMILIES",
    "as_action",
    "as_theta",
    "reward",
    "reveal",
    "validate_history",
]

MODEL_FAMILIES = ("beta_bernoulli", "gaussian_hier", "logit_hier", "beta_binomial_hier")


class DimensionError(ValueError):
    """Raised when vectors of different lengths are combined."""


def as_action(bits, m: int | None = None) -> np.ndarray:
    """Coerce ``bits`` to an int8 action vector, checking it is binary.

    If ``m`` is given the number of ones must equal ``m``.
    """
    a = np.asarray(bits)
    if a.ndim != 1:
        raise DimensionError(f"action must be one-dimensional, got shape {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("action entries must be 0 or 1")
    a = a.astype(np.int8)
    if m is not None and int(a.sum()) != m:
        raise ValueError(f"action selects {int(a.sum())} options, expected {m}")
    return a


def as_theta(theta, clip: bool = False) -> np.ndarray:
    t = np.asarray(theta, dtype=np.float64)
    if t.ndim != 1:
        raise DimensionError(f"theta must be one-dimensional, got shape {t.shape}")
    if clip:
        return np.clip(t, 0.0, 1.0)
    if np.any((t < 0.0) | (t > 1.0)) or np.any(np.isnan(t)):
        raise ValueError("theta entries must lie in [0, 1]")
    return t


def reward(action, theta) -> float:
    """Expected reward ``<a, theta>`` of an action."""
    a = np.asarray(action, dtype=np.float64)
    t = np.asarray(theta, dtype=np.float64)
    if a.shape != t.shape:
        raise DimensionError(f"action has shape {a.shape} but theta has shape {t.shape}")
    return float(a @ t)


def reveal(action, outcomes) -> np.ndarray:
    """Semi-bandit feedback: outcomes of chosen options, NaN elsewhere."""
    a = np.asarray(action)
    y = np.asarray(outcomes, dtype=np.float64)
    if a.shape != y.shape:
        raise DimensionError(f"action has shape {a.shape} but outcomes have shape {y.shape}")
    return np.where(a == 1, y, np.nan)


@dataclass(frozen=True)
class TypeStructure:
    """Maps each option to a pair (u, v) of side types.

    Options that share a (u, v) cell share one parameter.

    Attributes
    ----------
    u_of, v_of : ndarray of int
        0-based type ids per option.
    n_u, n_v : int
        Number of types on each side.
    """

    u_of: np.ndarray
    v_of: np.ndarray
    n_u: int
    n_v: int

    def __post_init__(self):
        u = np.asarray(self.u_of, dtype=np.int64)
        v = np.asarray(self.v_of, dtype=np.int64)
        if u.shape != v.shape or u.ndim != 1:
            raise DimensionError("u_of and v_of must be 1-d arrays of equal length")
        if u.size and (u.min() < 0 or u.max() >= self.n_u):
            raise ValueError("u type ids out of range")
        if v.size and (v.min() < 0 or v.max() >= self.n_v):
            raise ValueError("v type ids out of range")
        object.__setattr__(self, "u_of", u)
        object.__setattr__(self, "v_of", v)

    @classmethod
    def identity(cls, d: int) -> "TypeStructure":
        """Every option is its own cell (no sharing)."""
        return cls(np.arange(d), np.zeros(d, dtype=np.int64), d, 1)

    @classmethod
    def grid(cls, n_u: int, n_v: int) -> "TypeStructure":
        """Options are the cells of an ``n_u x n_v`` grid in row-major order.

        This is the layout used for one-to-one assignment and for
        (refugee type, affiliate) options.
        """
        u, v = np.divmod(np.arange(n_u * n_v), n_v)
        return cls(u, v, n_u, n_v)

    @property
    def d(self) -> int:
        return int(self.u_of.size)

    @property
    def n_cells(self) -> int:
        return self.n_u * self.n_v

    @property
    def cell_of(self) -> np.ndarray:
        """Flat cell id ``u * n_v + v`` per option."""
        return self.u_of * self.n_v + self.v_of


@dataclass(frozen=True)
class Record:
    """One period of the filtration: the action and what it revealed."""

    period: int
    action: np.ndarray
    values: np.ndarray

    @property
    def observed_mask(self) -> np.ndarray:
        return (~np.isnan(self.values)).astype(np.int8)


class History:
    """Append-only sequence of (period, action, revealed outcomes).

    Parameters
    ----------
    d : int
        Number of options.
    records : iterable of Record, optional
    """

    def __init__(self, d: int, records: Iterable[Record] = ()):
        self.d = int(d)
        self._records: list[Record] = []
        for r in records:
            self._records.append(r)

    def append(self, action, outcomes) -> Record:
        """Append a period. ``outcomes`` may be the full potential-outcome
        vector; only the chosen entries are kept."""
        a = as_action(action)
        if a.size != self.d:
            raise DimensionError(f"action has length {a.size}, history has d={self.d}")
        rec = Record(len(self._records) + 1, a, reveal(a, outcomes))
        self._records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def truncated(self, n: int) -> "History":
        """First ``n`` records as a new history."""
        return History(self.d, self._records[:n])

    def copy(self) -> "History":
        return History(self.d, self._records)

    @property
    def actions(self) -> np.ndarray:
        if not self._records:
            return np.zeros((0, self.d), dtype=np.int8)
        return np.stack([r.action for r in self._records])

    @property
    def values(self) -> np.ndarray:
        if not self._records:
            return np.zeros((0, self.d))
        return np.stack([r.values for r in self._records])

    def __eq__(self, other) -> bool:
        if not isinstance(other, History) or other.d != self.d or len(other) != len(self):
            return False
        for a, b in zip(self, other):
            if a.period != b.period or not np.array_equal(a.action, b.action):
                return False
            if not np.array_equal(a.values, b.values, equal_nan=True):
                return False
        return True

    # -- CSV ---------------------------------------------------------------
    def to_csv(self, path=None) -> str:
        """Long format, one row per (period, option).

        Columns ``period, option_index, chosen, outcome``; ``outcome`` is
        empty when the option was not chosen. Option indices are 1-based.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "option_index", "chosen", "outcome"])
        for rec in self._records:
            for j in range(self.d):
                chosen = int(rec.action[j])
                y = rec.values[j]
                w.writerow([rec.period, j + 1, chosen, "" if np.isnan(y) else repr(float(y))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text, d: int | None = None) -> "History":
        if "\n" in str(path_or_text):
            text = str(path_or_text)
        else:
            with open(path_or_text, encoding="utf-8") as fh:
                text = fh.read()
        rows = list(csv.DictReader(io.StringIO(text)))
        if d is None:
            d = max((int(r["option_index"]) for r in rows), default=0)
        by_period: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for r in rows:
            t = int(r["period"])
            j = int(r["option_index"]) - 1
            if not 0 <= j < d:
                raise ValueError(f"option_index {j + 1} out of range for d={d}")
            a, y = by_period.setdefault(t, (np.zeros(d, dtype=np.int8), np.full(d, np.nan)))
            a[j] = int(r["chosen"])
            if r["outcome"] != "":
                y[j] = float(r["outcome"])
        periods = sorted(by_period)
        if periods != list(range(1, len(periods) + 1)):
            raise ValueError("periods must run 1, 2, ... without gaps")
        return cls(d, [Record(t, *by_period[t]) for t in periods])


def validate_history(h: History, d: int, m: int) -> tuple[bool, list[str]]:
    """Check every record against the action and outcome invariants.

    Returns ``(ok, problems)``; ``problems`` lists one message per violation.
    """
    problems: list[str] = []
    if h.d != d:
        problems.append(f"history has d={h.d}, expected {d}")
    for i, rec in enumerate(h):
        if rec.period != i + 1:
            problems.append(f"record {i}: period {rec.period}, expected {i + 1}")
        a = np.asarray(rec.action)
        y = np.asarray(rec.values, dtype=np.float64)
        if a.shape != (d,) or y.shape != (d,):
            problems.append(f"period {rec.period}: wrong length")
            continue
        if not np.all((a == 0) | (a == 1)):
            problems.append(f"period {rec.period}: action is not binary")
        elif int(a.sum()) != m:
            problems.append(f"period {rec.period}: action selects {int(a.sum())} options, expected {m}")
        mask = ~np.isnan(y)
        if not np.array_equal(mask.astype(np.int8), a.astype(np.int8)):
            problems.append(f"period {rec.period}: observed mask differs from action")
        obs = y[mask]
        if np.any((obs < 0.0) | (obs > 1.0)):
            problems.append(f"period {rec.period}: outcome outside [0, 1]")
    return (not problems, problems)


@dataclass
class ScenarioConfig:
    """Fixed dimensions and model choice for one simulated scenario."""

    d: int
    m: int
    T: int
    feasible_set: object
    model_family: str = "beta_bernoulli"
    seed: int = 0
    hyperparameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.m <= self.d:
            raise ValueError(f"need 1 <= m <= d, got m={self.m}, d={self.d}")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.model_family not in MODEL_FAMILIES:
            raise ValueError(f"unknown model family {self.model_family!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
