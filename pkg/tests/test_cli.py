import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from combi_bandit.cli import (
    CaseFileError,
    CaseRecord,
    ConfigError,
    RunManifest,
    emit_cases,
    ingest_cases,
    load_config,
    main,
    scenario_from_cases,
)
from combi_bandit.metrics import per_capita_bound, theorem1_bound

HEADER = "case_id,family_size,working_age,female,english,us_tie,tied_affiliate,arrival_month,employed_90d"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


# --- case files ---------------------------------------------------------------
def test_ingest_three_rows():
    text = HEADER + "\nc1,3,1,0,1,0,,1,1\nc2,1,0,0,0,1,4,2,\nc3,5,1,1,1,0,,2,0\n"
    recs = ingest_cases(text)
    assert len(recs) == 3
    assert recs[0].u_type == 6
    assert recs[1].us_tie and recs[1].tied_affiliate == 4 and recs[1].employed_90d is None
    assert recs[2].u_type == 8


def test_missing_tied_affiliate_names_the_row():
    text = HEADER + "\nc1,3,1,0,1,0,,1,1\nc2,2,0,0,0,1,,2,\n"
    with pytest.raises(CaseFileError) as err:
        ingest_cases(text)
    assert "row 2" in str(err.value) and "tied_affiliate" in str(err.value)


def test_every_bad_row_is_reported():
    text = HEADER + "\nc1,x,1,0,1,0,,1,1\nc2,0,0,0,0,0,,2,\nc3,1,2,0,0,0,,2,\n"
    with pytest.raises(CaseFileError) as err:
        ingest_cases(text)
    assert len(err.value.problems) == 3


def test_missing_columns_are_an_error():
    with pytest.raises(CaseFileError):
        ingest_cases("case_id,family_size\nc1,2\n")


case_records = st.builds(
    lambda i, size, bits, tie, aff, month, emp: CaseRecord(
        f"case{i}", size, *bits, tie, aff if tie else None, month, emp),
    st.integers(0, 10**6), st.integers(1, 12),
    st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)),
    st.booleans(), st.integers(1, 40), st.integers(0, 60), st.sampled_from([None, 0, 1]))


@given(st.lists(case_records, max_size=15, unique_by=lambda r: r.case_id))
@settings(max_examples=60, deadline=None)
def test_case_file_round_trip(records):
    assert ingest_cases(emit_cases(records) + "\n") == records


def test_scenario_from_cases_filters_small_affiliates():
    rows = [HEADER + ",affiliate"]
    for i in range(12):
        rows.append(f"a{i},{1 + i % 3},{i % 2},0,1,0,,{i % 4},{i % 2},1")
    for i in range(3):
        rows.append(f"b{i},2,1,1,0,0,,{i},1,2")
    rows.append("t0,2,1,1,0,1,1,0,1,")
    recs = ingest_cases("\n".join(rows) + "\n")
    sc = scenario_from_cases(recs, min_cases=5, warmup=200, n_draws=200)
    assert sc.n_v == 1 and sc.n_u == 8
    assert len(sc.families) == 13
    assert sc.annual_counts.sum() == sum(1 + i % 3 for i in range(12))
    assert sc.theta0.size == 8 and np.all((sc.theta0 > 0) & (sc.theta0 < 1))


# --- config ---------------------------------------------------------------------
def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config(_write(tmp_path / "c.ini", "[scenario]\nd = 9\nm = 3\ntheta0 = 0.1, 0.2\n"))
    assert cfg["scenario"]["d"] == 9 and cfg["scenario"]["theta0"] == [0.1, 0.2]
    assert cfg["model"]["family"] == "beta_bernoulli"


def test_inline_comments_are_ignored(tmp_path):
    cfg = load_config(_write(tmp_path / "c.ini", "[model]\nfamily = logit_hier   ; hierarchical\n"))
    assert cfg["model"]["family"] == "logit_hier"


def test_unknown_key_is_rejected(tmp_path):
    path = _write(tmp_path / "c.ini", "[scenario]\ndd = 4\n")
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["bound", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_bad_values_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "c.ini", "[model]\nfamily = probit\n"))
    with pytest.raises(ConfigError):
        RunManifest("simulate", replications=0)
    with pytest.raises(ConfigError):
        RunManifest("plot")


# --- commands -------------------------------------------------------------------
def test_bound_command(tmp_path):
    cfg = _write(tmp_path / "c.ini", "[scenario]\nd = 4\nm = 2\nT = 100\n")
    out = tmp_path / "out"
    assert main(["bound", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "bounds.csv").read_text())))
    assert len(rows) == 100
    assert float(rows[99]["cumulative_bound"]) == pytest.approx(26.024, abs=1e-3)
    assert float(rows[0]["per_capita_bound"]) == pytest.approx(per_capita_bound(4, 2, 1))
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "bound" and man["exit_status"] == 0
    assert len(man["config_sha256"]) == 64 and man["files"] == ["bounds.csv"]


def test_simulate_is_byte_identical(tmp_path):
    cfg = _write(tmp_path / "c.ini", "[scenario]\nd = 4\nm = 2\nT = 30\n")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["simulate", "--config", cfg, "--seed", "17", "--reps", "2", "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix == ".csv")
    assert "trajectory_002.csv" in names and "regret_summary.csv" in names
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
    summary = list(csv.DictReader(io.StringIO((outs[0] / "regret_summary.csv").read_text())))
    assert float(summary[-1]["cumulative_bound"]) == pytest.approx(theorem1_bound(4, 2, 30))


def test_lemmas_command(tmp_path):
    out = tmp_path / "out"
    assert main(["lemmas", "--out", str(out)]) == 0
    text = (out / "lemmas.txt").read_text()
    assert text.count("ok = True") == 3 and "ok = False" not in text


def test_infer_command(tmp_path):
    cfg = _write(tmp_path / "c.ini", "[scenario]\nd = 4\nm = 2\nT = 20\n"
                 "[inference]\nn_resamples = 19\ngroup_a = 1\ngroup_b = 4\n")
    out = tmp_path / "out"
    assert main(["infer", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    report = dict(line.split(" = ") for line in (out / "test_report.txt").read_text().splitlines())
    p = float(report["p_value"])
    assert 1 / 20 <= p <= 1 and math.isclose(p * 20, round(p * 20))
    # a recorded history file can be tested directly
    cfg2 = _write(tmp_path / "c2.ini", "[scenario]\nd = 4\nm = 2\n"
                  f"[inference]\nn_resamples = 19\ngroup_a = 1\ngroup_b = 4\nhistory = {out / 'history.csv'}\n")
    out2 = tmp_path / "out2"
    assert main(["infer", "--config", cfg2, "--seed", "3", "--out", str(out2)]) == 0
    assert len((out2 / "resamples.csv").read_text().splitlines()) == 20


def test_resettle_command_on_small_synthetic_scenario(tmp_path):
    cfg = _write(tmp_path / "c.ini", "[scenario]\nk_u = 4\nk_v = 3\nmonths = 4\narrival_rate = 6\n")
    out = tmp_path / "out"
    assert main(["resettle", "--config", cfg, "--out", str(out)]) == 0
    months = (out / "months_001.csv").read_text().splitlines()
    assert len(months) == 5


def test_exit_codes_separate_bad_config_from_runtime_errors(tmp_path):
    cfg = _write(tmp_path / "c.ini", "[scenario]\nd = 4\nm = 2\ntheta0 = 0.1, 0.2\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    cfg = _write(tmp_path / "d.ini", "[scenario]\nd = 3\nm = 1\ntheta0 = 0.1, 0.2, 1.5\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
