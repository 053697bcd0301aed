"""Command-line entry point: ``combi-bandit COMMAND [--config PATH] [--seed N] [--reps N] [--out DIR]``.

Commands
--------
simulate   Thompson sampling replications on a synthetic bandit.
resettle   Monthly family-to-affiliate matching on a synthetic or CSV case file.
bound      Regret bound curves.
lemmas     Exact information-inequality checks on the packaged instances.
infer      Randomization test on a history file (or a freshly simulated one).

Configuration is an INI file with the sections ``scenario``, ``model``,
``solver``, ``mcmc`` and ``inference``. Every key is optional; unknown
sections or keys are errors. See ``CONFIG_SCHEMA`` for the keys, their
types and defaults.

Case files (``scenario.cases``) are UTF-8 CSV with the header::

    case_id,family_size,working_age,female,english,us_tie,tied_affiliate,arrival_month,employed_90d

and an optional trailing ``affiliate`` column holding the historical
placement (needed to calibrate capacities). Affiliates are anonymized
integer ids starting at 1; months are integers; ``employed_90d`` may be
empty. The refugee type is ``working_age*4 + female*2 + english + 1``.

Every run writes ``manifest.json`` to the output directory with the
command, seed, replication count, package version and the SHA-256 of the
configuration file.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import __version__
from .domain import History, TypeStructure
from .engine import (
    Environment,
    Family,
    ResettlementScenario,
    generate_synthetic_scenario,
    run_episode,
    run_replications,
    run_resettlement,
    thread_limit,
)
from .inference import NullSpec, mean_difference, randomization_test
from .metrics import bound_curve_csv, packaged_instances, theorem1_bound, verify_lemma_properties
from .posterior import BetaBernoulliModel, CellObservations, HierarchicalModel, HierarchicalPrior, mcmc_sample_logit
from . import solvers
from .solvers import Assignment, TopM

__all__ = [
    "COMMANDS",
    "CONFIG_SCHEMA",
    "ConfigError",
    "CaseFileError",
    "RunManifest",
    "CaseRecord",
    "CASE_COLUMNS",
    "load_config",
    "ingest_cases",
    "emit_cases",
    "scenario_from_cases",
    "run_command",
    "main",
]

COMMANDS = ("simulate", "resettle", "bound", "lemmas", "infer")


class ConfigError(ValueError):
    """Bad configuration file or command-line arguments."""


class CaseFileError(ValueError):
    """One or more rows of a case file are invalid; ``problems`` lists them."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


CONFIG_SCHEMA: dict[str, dict[str, tuple]] = {
    "scenario": {
        "d": (int, 4),
        "m": (int, 2),
        "T": (int, 100),
        "feasible_set": (_choice("top_m", "assignment"), "top_m"),
        "theta0": (_floats, None),
        "outcome_family": (_choice("bernoulli", "gaussian_truncated", "beta_binomial"), "bernoulli"),
        "sigma": (float, 0.1),
        "dispersion": (float, 2.0),
        "y_max": (int, 1),
        "seed": (int, 0),
        "k_u": (int, 8),
        "k_v": (int, 17),
        "months": (int, 24),
        "arrival_rate": (float, 40.0),
        "us_tie_prob": (float, 0.3),
        "capacity_factor": (float, 1.1),
        "ties_consume_capacity": (_bool, False),
        "cases": (str, None),
        "min_cases": (int, 0),
        "depth": (int, 3),
    },
    "model": {
        "family": (_choice("beta_bernoulli", "gaussian_hier", "logit_hier", "beta_binomial_hier"),
                   "beta_bernoulli"),
        "alpha0": (float, 1.0),
        "beta0": (float, 1.0),
        "mu_sd": (float, 5.0),
        "tau_scale": (float, 2.5),
        "sigma_scale": (float, 2.5),
        "refit_every": (int, 1),
    },
    "solver": {
        "knapsack_method": (_choice("auto", "bnb", "milp"), "auto"),
        "check_solutions": (_bool, False),
    },
    "mcmc": {
        "warmup": (int, 2000),
        "thin": (int, 1),
    },
    "inference": {
        "null": (_choice("row", "column", "global"), "global"),
        "n_resamples": (int, 199),
        "group_a": (_ints, None),
        "group_b": (_ints, None),
        "two_sided": (_bool, False),
        "history": (str, None),
        "alpha": (float, 0.05),
    },
}


def load_config(path: str | None) -> dict:
    """Parse an INI configuration into ``{section: {key: value}}`` with defaults filled in."""
    cfg = {sec: {k: default for k, (_, default) in keys.items()}
           for sec, keys in CONFIG_SCHEMA.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    problems = []
    for sec in parser.sections():
        if sec not in CONFIG_SCHEMA:
            problems.append(f"unknown section [{sec}]")
            continue
        for key, raw in parser.items(sec):
            if key not in CONFIG_SCHEMA[sec]:
                problems.append(f"unknown key {sec}.{key}")
                continue
            conv = CONFIG_SCHEMA[sec][key][0]
            try:
                cfg[sec][key] = conv(raw)
            except ValueError as exc:
                problems.append(f"{sec}.{key}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


# ---------------------------------------------------------------------------
# case files
# ---------------------------------------------------------------------------

CASE_COLUMNS = ("case_id", "family_size", "working_age", "female", "english", "us_tie",
                "tied_affiliate", "arrival_month", "employed_90d")


@dataclass(frozen=True)
class CaseRecord:
    """One family. ``u_type`` is 1-based (1..8); affiliates are 1-based ids."""

    case_id: str
    family_size: int
    working_age: int
    female: int
    english: int
    us_tie: bool
    tied_affiliate: int | None
    arrival_month: int
    employed_90d: int | None = None
    affiliate: int | None = None

    @property
    def u_type(self) -> int:
        return self.working_age * 4 + self.female * 2 + self.english + 1


def _parse_case(row: dict, line: int) -> tuple[CaseRecord | None, list[str]]:
    errs = []

    def integer(name, required=True, allowed=None):
        raw = (row.get(name) or "").strip()
        if raw == "":
            if required:
                errs.append(f"row {line}: {name} is empty")
            return None
        try:
            v = int(raw)
        except ValueError:
            errs.append(f"row {line}: {name} is not an integer ({raw!r})")
            return None
        if allowed is not None and v not in allowed:
            errs.append(f"row {line}: {name} must be one of {sorted(allowed)}, got {v}")
            return None
        return v

    case_id = (row.get("case_id") or "").strip()
    if not case_id:
        errs.append(f"row {line}: case_id is empty")
    size = integer("family_size")
    if size is not None and size < 1:
        errs.append(f"row {line}: family_size must be at least 1, got {size}")
    bits = [integer(n, allowed={0, 1}) for n in ("working_age", "female", "english")]
    tie = integer("us_tie", allowed={0, 1})
    tied_aff = integer("tied_affiliate", required=False)
    month = integer("arrival_month")
    employed = integer("employed_90d", required=False, allowed={0, 1})
    aff = integer("affiliate", required=False) if "affiliate" in row else None
    if tie == 1 and tied_aff is None:
        errs.append(f"row {line}: us_tie=1 but tied_affiliate is empty")
    if tie == 0 and tied_aff is not None:
        errs.append(f"row {line}: tied_affiliate given but us_tie=0")
    for name, v in (("tied_affiliate", tied_aff), ("affiliate", aff)):
        if v is not None and v < 1:
            errs.append(f"row {line}: {name} ids start at 1, got {v}")
    if errs:
        return None, errs
    return CaseRecord(case_id, size, *bits, bool(tie), tied_aff, month, employed, aff), []


def ingest_cases(path_or_text) -> list[CaseRecord]:
    """Read and validate a case CSV. Raises :class:`CaseFileError` listing
    every bad row (data rows are numbered from 1)."""
    if "\n" in str(path_or_text):
        text = str(path_or_text)
    else:
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in CASE_COLUMNS if c not in header]
    if missing:
        raise CaseFileError([f"missing columns: {', '.join(missing)}"])
    extra = [c for c in header if c not in CASE_COLUMNS and c != "affiliate"]
    if extra:
        raise CaseFileError([f"unknown columns: {', '.join(extra)}"])
    records, problems, seen = [], [], set()
    for line, row in enumerate(reader, start=1):
        rec, errs = _parse_case(row, line)
        problems.extend(errs)
        if rec is not None:
            if rec.case_id in seen:
                problems.append(f"row {line}: duplicate case_id {rec.case_id!r}")
            seen.add(rec.case_id)
            records.append(rec)
    if problems:
        raise CaseFileError(problems)
    return records


def emit_cases(records, path=None) -> str:
    """Write records in the case-file format (inverse of :func:`ingest_cases`)."""
    with_aff = any(r.affiliate is not None for r in records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CASE_COLUMNS) + (["affiliate"] if with_aff else []))
    for r in records:
        row = [r.case_id, r.family_size, r.working_age, r.female, r.english, int(r.us_tie),
               "" if r.tied_affiliate is None else r.tied_affiliate, r.arrival_month,
               "" if r.employed_90d is None else r.employed_90d]
        if with_aff:
            row.append("" if r.affiliate is None else r.affiliate)
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def scenario_from_cases(records, min_cases: int = 0, capacity_factor: float = 1.1,
                        ties_consume_capacity: bool = False, theta0=None,
                        rng: np.random.Generator | None = None,
                        warmup: int = 2000, n_draws: int = 1000) -> ResettlementScenario:
    """Build a resettlement scenario from case records.

    Affiliates with fewer than ``min_cases`` cases are dropped together with
    the families tied to them. Capacities come from the historical
    placements (``affiliate`` column) of families without ties. Unless
    ``theta0`` is given, cell parameters are set to the posterior mean of the
    hierarchical logit model fitted to the recorded ``employed_90d`` values.
    """
    def home(r):
        return r.tied_affiliate if r.us_tie else r.affiliate

    problems = [f"case {r.case_id}: no affiliate recorded" for r in records
                if not r.us_tie and r.affiliate is None]
    if problems:
        raise CaseFileError(problems)
    counts: dict[int, int] = {}
    for r in records:
        counts[home(r)] = counts.get(home(r), 0) + 1
    kept = sorted(a for a, c in counts.items() if c >= min_cases)
    if not kept:
        raise CaseFileError(["no affiliate has enough cases"])
    index = {a: i for i, a in enumerate(kept)}
    recs = [r for r in records if home(r) in index]
    n_u, n_v = 8, len(kept)
    first = min(r.arrival_month for r in recs)
    months = max(r.arrival_month for r in recs) - first + 1
    annual = np.zeros(((months + 11) // 12, n_v))
    families = []
    for i, r in enumerate(recs):
        t = r.arrival_month - first
        if not r.us_tie:
            annual[t // 12, index[r.affiliate]] += r.family_size
        families.append(Family(i, r.family_size, r.u_type - 1, t, r.us_tie,
                               index[r.tied_affiliate] if r.us_tie else None, index[home(r)]))
    if theta0 is None:
        cells = [(r.u_type - 1) * n_v + index[home(r)] for r in recs if r.employed_90d is not None]
        ys = [float(r.employed_90d) for r in recs if r.employed_90d is not None]
        obs = CellObservations(n_u, n_v, np.array(cells, dtype=np.int64), np.array(ys))
        fit = mcmc_sample_logit(obs, n_draws=n_draws, warmup=warmup,
                                rng=rng if rng is not None else np.random.default_rng(0))
        theta0 = fit.cell_draws.mean(axis=0)
    return ResettlementScenario(n_u, n_v, months, families, annual, theta0, capacity_factor,
                                ties_consume_capacity)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything needed to reproduce a run."""

    command: str
    config_path: str | None = None
    output_dir: str = "."
    seed: int | None = None
    replications: int = 1
    files: list = field(default_factory=list)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


def _feasible_set(sc: dict):
    if sc["feasible_set"] == "assignment":
        k = int(round(sc["d"] ** 0.5))
        if k * k != sc["d"] or sc["m"] != k:
            raise ConfigError("assignment needs d = k*k and m = k")
        return Assignment(k)
    if not 1 <= sc["m"] <= sc["d"]:
        raise ConfigError("need 1 <= m <= d")
    return TopM(sc["d"], sc["m"])


def _type_structure(fs, d: int) -> TypeStructure:
    if isinstance(fs, Assignment):
        return TypeStructure.grid(fs.k, fs.k)
    return TypeStructure.identity(d)


def _prior(cfg) -> HierarchicalPrior:
    md = cfg["model"]
    return HierarchicalPrior(mu_sd=md["mu_sd"], tau_scale=md["tau_scale"],
                             sigma_scale=md["sigma_scale"])


def _model_factory(cfg, ts: TypeStructure):
    md = cfg["model"]
    if md["family"] == "beta_bernoulli":
        return partial(BetaBernoulliModel, ts, md["alpha0"], md["beta0"])
    return partial(HierarchicalModel, md["family"], ts, _prior(cfg), cfg["mcmc"]["warmup"],
                   cfg["mcmc"]["thin"], md["refit_every"])


def _environment(cfg, rng) -> Environment:
    sc = cfg["scenario"]
    theta0 = sc["theta0"]
    if theta0 is None:
        theta0 = rng.random(sc["d"])
    elif len(theta0) != sc["d"]:
        raise ConfigError(f"scenario.theta0 has {len(theta0)} entries, expected d={sc['d']}")
    return Environment(np.asarray(theta0), sc["outcome_family"], sc["sigma"], sc["dispersion"],
                       sc["y_max"])


def _write(out, name, text, files):
    with open(os.path.join(out, name), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    files.append(name)


def _cmd_bound(cfg, man, files):
    sc = cfg["scenario"]
    _write(man.output_dir, "bounds.csv", bound_curve_csv(sc["d"], sc["m"], sc["T"]), files)
    return 0


def _cmd_simulate(cfg, man, files):
    sc = cfg["scenario"]
    fs = _feasible_set(sc)
    rng = np.random.default_rng(np.random.SeedSequence([man.seed, 0xE17]))
    env = _environment(cfg, rng)
    factory = _model_factory(cfg, _type_structure(fs, fs.d))
    trajs = run_replications(env, factory, fs, sc["T"], man.replications, seed=man.seed)
    for r, tr in enumerate(trajs, start=1):
        _write(man.output_dir, f"trajectory_{r:03d}.csv", tr.to_csv(), files)
        _write(man.output_dir, f"history_{r:03d}.csv", tr.history.to_csv(), files)
    mean_cum = np.mean([tr.cumulative_regret for tr in trajs], axis=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "mean_cumulative_regret", "cumulative_bound"])
    for t in range(1, sc["T"] + 1):
        w.writerow([t, repr(float(mean_cum[t - 1])), repr(theorem1_bound(fs.d, fs.m, t))])
    _write(man.output_dir, "regret_summary.csv", buf.getvalue(), files)
    return 0


def _cmd_resettle(cfg, man, files):
    sc = cfg["scenario"]
    if sc["cases"]:
        scenario = scenario_from_cases(ingest_cases(sc["cases"]), sc["min_cases"],
                                       sc["capacity_factor"], sc["ties_consume_capacity"],
                                       rng=np.random.default_rng([man.seed, 1]),
                                       warmup=cfg["mcmc"]["warmup"])
    else:
        scenario = generate_synthetic_scenario(sc["k_u"], sc["k_v"], sc["months"],
                                               sc["arrival_rate"], man.seed, sc["us_tie_prob"],
                                               capacity_factor=sc["capacity_factor"])
        scenario.ties_consume_capacity = sc["ties_consume_capacity"]
    factory = _model_factory(cfg, scenario.type_structure)
    for r in range(1, man.replications + 1):
        res = run_resettlement(scenario, factory(), np.random.default_rng([man.seed, r]))
        _write(man.output_dir, f"months_{r:03d}.csv", res.months_csv(), files)
        _write(man.output_dir, f"placements_{r:03d}.csv", res.placements_csv(), files)
    return 0


def _cmd_lemmas(cfg, man, files):
    depth = cfg["scenario"]["depth"]
    lines, ok = [], True
    for inst in packaged_instances():
        rep = verify_lemma_properties(inst, depth=depth)
        ok &= rep.ok
        lines.append(f"[{inst.name}]")
        lines.extend(rep.lines())
        lines.append("")
    _write(man.output_dir, "lemmas.txt", "\n".join(lines), files)
    return 0 if ok else 1


def _cmd_infer(cfg, man, files):
    sc, inf = cfg["scenario"], cfg["inference"]
    fs = _feasible_set(sc)
    ts = _type_structure(fs, fs.d)
    factory = _model_factory(cfg, ts)
    rng = np.random.default_rng(np.random.SeedSequence([man.seed, 0x1FE]))
    if inf["history"]:
        history = History.from_csv(inf["history"], d=fs.d)
    else:
        env = _environment(cfg, rng)
        history = run_episode(env, factory(), fs, sc["T"], rng).history
        _write(man.output_dir, "history.csv", history.to_csv(), files)
    half = fs.d // 2
    group_a = [j - 1 for j in inf["group_a"]] if inf["group_a"] else list(range(half))
    group_b = [j - 1 for j in inf["group_b"]] if inf["group_b"] else list(range(half, fs.d))
    if any(not 0 <= j < fs.d for j in group_a + group_b):
        raise ConfigError("inference groups must list option indices between 1 and d")
    stat = mean_difference(group_a, group_b, absolute=inf["two_sided"])
    null = NullSpec(inf["null"], None if inf["null"] == "global" else ts)
    result = randomization_test(history, null, stat, inf["n_resamples"], rng, factory(), fs)
    report = result.report() + f"alpha = {inf['alpha']!r}\nreject = {int(result.p_value <= inf['alpha'])}\n"
    _write(man.output_dir, "test_report.txt", report, files)
    _write(man.output_dir, "resamples.csv", result.resamples_csv(), files)
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "resettle": _cmd_resettle,
    "bound": _cmd_bound,
    "lemmas": _cmd_lemmas,
    "infer": _cmd_infer,
}


def _config_hash(path) -> str | None:
    if path is None:
        return None
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run_command(manifest: RunManifest) -> int:
    """Run one command; returns the exit status (0 success, 1 check failed,
    2 bad input). Errors are reported on stderr as ``error: <kind>: <message>``."""
    try:
        cfg = load_config(manifest.config_path)
        if manifest.seed is None:
            manifest.seed = cfg["scenario"]["seed"]
        os.makedirs(manifest.output_dir, exist_ok=True)
        if not os.access(manifest.output_dir, os.W_OK):
            raise ConfigError(f"output directory {manifest.output_dir} is not writable")
        previous = solvers.CHECK_SOLUTIONS
        solvers.CHECK_SOLUTIONS = previous or cfg["solver"]["check_solutions"]
        previous_method = solvers.MKP_DEFAULT_METHOD
        solvers.MKP_DEFAULT_METHOD = cfg["solver"]["knapsack_method"]
        try:
            status = _HANDLERS[manifest.command](cfg, manifest, manifest.files)
        finally:
            solvers.CHECK_SOLUTIONS = previous
            solvers.MKP_DEFAULT_METHOD = previous_method
    except (ConfigError, CaseFileError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    record = {
        "command": manifest.command,
        "config_path": manifest.config_path,
        "config_sha256": _config_hash(manifest.config_path),
        "seed": manifest.seed,
        "replications": manifest.replications,
        "version": __version__,
        "threads": thread_limit(),
        "files": sorted(manifest.files),
        "exit_status": status,
    }
    with open(os.path.join(manifest.output_dir, "manifest.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="combi-bandit",
                                description="Thompson sampling for combinatorial allocation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--seed", type=int, metavar="U64", help="base seed (overrides scenario.seed)")
    p.add_argument("--reps", type=int, default=1, metavar="N", help="replications (default 1)")
    p.add_argument("--out", default=".", metavar="DIR", help="output directory (default .)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = RunManifest(args.command, args.config, args.out, args.seed, args.reps)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 2
    return run_command(manifest)


if __name__ == "__main__":
    sys.exit(main())
