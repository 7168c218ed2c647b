import csv
import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privsgp import cli
from privsgp.config import SCHEMA, ConfigError, _bool, _float, _number_or_list, parse_text, resolved, serialize_config
from privsgp.engine import MetricsRecord
from privsgp.io import dump_state, load_state, read_metrics_csv
from privsgp.privacy import PrivacyBudget, ProblemConstants, utility_bound
from privsgp.recipes import ExperimentRecipe, thread_cap

finite = st.floats(-1e12, 1e12, allow_nan=False)


def value_strategy(key, spec):
    if spec.choices:
        return st.sampled_from(spec.choices)
    if spec.parse is int:
        return st.integers(0, 10**9)
    if spec.parse is _float:
        return st.one_of(finite, st.just(math.inf))
    if spec.parse is _bool:
        return st.booleans()
    if spec.parse is str:
        return st.from_regex(r"[A-Za-z0-9_./-]{1,20}", fullmatch=True)
    if spec.parse is _number_or_list:
        return st.one_of(finite, st.lists(finite, min_size=2, max_size=5).map(tuple))
    if key == "sweep.seeds":
        return st.lists(st.integers(0, 10**6), max_size=5).map(tuple)
    return st.lists(finite, max_size=5).map(tuple)


config_dicts = st.fixed_dictionaries({}, optional={k: value_strategy(k, s) for k, s in SCHEMA.items()})


@given(config_dicts)
def test_config_round_trip(cfg):
    text = serialize_config(cfg)
    back = parse_text(text)
    assert back == cfg
    assert serialize_config(back) == text


def test_config_errors_carry_line_numbers():
    text = "run.n = 4\n# comment\nrun.nodes = 3\nrun.K = many\nprivacy.mode = loud\nrun.n = 5\n"
    with pytest.raises(ConfigError) as err:
        parse_text(text, "x.cfg")
    msgs = err.value.errors
    assert msgs[0].startswith("x.cfg:3: unknown key")
    assert msgs[1].startswith("x.cfg:4: bad value")
    assert msgs[2].startswith("x.cfg:5: privacy.mode must be one of")
    assert msgs[3].startswith("x.cfg:6: duplicate key")


def test_config_value_parsing():
    cfg = parse_text("privacy.epsilon = 1, 2\nprivacy.delta = 1e-5\nsweep.values =\nrun.record_anchors = yes\n")
    assert cfg["privacy.epsilon"] == (1.0, 2.0)
    assert cfg["privacy.delta"] == 1e-5
    assert cfg["sweep.values"] == ()
    assert cfg["run.record_anchors"] is True
    with pytest.raises(ConfigError):
        parse_text("run.gamma = nan\n")
    assert resolved({})["privacy.clip"] == math.inf


def test_empty_sweep_rejected():
    with pytest.raises(ConfigError, match="empty"):
        ExperimentRecipe.from_config(resolved({"sweep.recipe": "k-sweep"}))


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("PRIVSGP_THREADS", raising=False)
    assert thread_cap(8) == 8
    monkeypatch.setenv("PRIVSGP_THREADS", "2")
    assert thread_cap(8) == 2 and thread_cap(1) == 1
    monkeypatch.setenv("PRIVSGP_THREADS", "lots")
    with pytest.raises(ConfigError):
        thread_cap(4)


def test_state_file_round_trip(tmp_path):
    Z = np.random.default_rng(0).standard_normal((3, 5))
    f = tmp_path / "s.bin"
    dump_state(f, Z)
    raw = f.read_bytes()
    assert struct.unpack_from("<4sIQ", raw) == (b"PSGP", 3, 5)
    assert len(raw) == 16 + 8 * 15
    np.testing.assert_array_equal(load_state(f), Z)
    f.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_state(f)
    f.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_state(f)


# ---------------------------------------------------------------- command line


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


TOY_PLAN = """
run.n = 4
problem.samples = 40
privacy.epsilon = 1
privacy.delta = 0.36787944117144233
constants.L = 1
constants.b2 = 0
constants.F0 = 1
constants.x0_sq = 0
constants.G = 1
constants.d = 1
"""


def test_plan_k_reference(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "p.cfg", TOY_PLAN)
    assert cli.main(["plan-k", "--config", cfg]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["K_star"] == 6
    const = ProblemConstants(L=1, b2=0, F0=1, x0_sq=0, G=1, d=1)
    budgets = [PrivacyBudget(1.0, math.exp(-1))] * 4
    assert out["predicted_bound"] == pytest.approx(utility_bound(const, budgets, 4, 10), rel=1e-12)
    assert len(out["sigma_per_node"]) == 4 and out["sigma"] == max(out["sigma_per_node"])


def test_plan_k_heterogeneous_budgets(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "p.cfg", TOY_PLAN.replace("privacy.epsilon = 1", "privacy.epsilon = 1, 1, 2, 4"))
    assert cli.main(["plan-k", "--config", cfg]) == 0
    out = json.loads(capsys.readouterr().out)
    s = out["sigma_per_node"]
    assert s[0] == s[1] == pytest.approx(2 * s[2]) and s[2] == pytest.approx(2 * s[3])


def test_plan_k_needs_constants(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "p.cfg", "privacy.epsilon = 1\nprivacy.delta = 1e-5\n")
    assert cli.main(["plan-k", "--config", cfg]) == 2
    assert "constants.L" in capsys.readouterr().err


def test_calibrate_reports_both_methods(tmp_path, capsys):
    base = "run.n = 4\nrun.K = 500\nproblem.samples = 200\nprivacy.epsilon = 1\nprivacy.delta = 1e-5\nprivacy.clip = 1\n"
    cfg = write_cfg(tmp_path / "c.cfg", base)
    assert cli.main(["calibrate", "--config", cfg]) == 0
    closed = json.loads(capsys.readouterr().out)
    assert closed["method"] == "closed-form"
    cfg = write_cfg(tmp_path / "a.cfg", base + "privacy.mode = budget-accountant\n")
    assert cli.main(["calibrate", "--config", cfg]) == 0
    acct = json.loads(capsys.readouterr().out)
    assert acct["method"] == "accountant"
    assert acct["epsilon_check"][0] <= 1.0


def test_topology_check(tmp_path, capsys):
    assert cli.main(["topology-check"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["strongly_connected"] and out["period"] == 4 and out["q"] < 1
    cfg = write_cfg(tmp_path / "t.cfg", "run.n = 8\ntopology.B = 1\n")
    assert cli.main(["topology-check", "--config", cfg]) == 1
    assert json.loads(capsys.readouterr().out)["strongly_connected"] is False


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["frobnicate"]) == 2
    bad = write_cfg(tmp_path / "bad.cfg", "run.n = 4\nrun.bogus = 1\n")
    assert cli.main(["run", "--config", bad]) == 2
    assert "bad.cfg:2: unknown key" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    empty = write_cfg(tmp_path / "e.cfg", "sweep.recipe = eps-sweep\n")
    assert cli.main(["sweep", "--config", empty]) == 2
    assert cli.main(["sweep"]) == 2
    assert cli.main(["run", "--seed", "-1"]) == 2
    assert cli.main(["schema"]) == 0
    assert "privacy.clip" in capsys.readouterr().out


RUN_CFG = """
run.n = 4
run.K = 30
run.metrics_stride = 10
run.dump_state = true
problem.samples = 40
problem.dim = 3
privacy.mode = fixed-sigma
privacy.sigma = 0.5
"""


def run_cli(tmp_path, name, *extra):
    cfg = write_cfg(tmp_path / "r.cfg", RUN_CFG)
    out = tmp_path / name
    assert cli.main(["run", "--config", cfg, "--out", str(out), *extra]) == 0
    return out


def metric_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    wall = rows[0].index("wall_ms")
    return rows[0], [[v for i, v in enumerate(r) if i != wall] for r in rows[1:]]


def test_run_outputs_and_reproducibility(tmp_path, capsys):
    a = run_cli(tmp_path, "a", "--seed", "7")
    b = run_cli(tmp_path, "b", "--seed", "7")
    c = run_cli(tmp_path, "c", "--seed", "8")
    header, rows_a = metric_rows(a / "run_seed7.csv")
    assert tuple(header) == MetricsRecord.FIELDS
    assert [int(r[0]) for r in rows_a] == [0, 10, 20, 30]
    assert rows_a == metric_rows(b / "run_seed7.csv")[1]
    assert rows_a != metric_rows(c / "run_seed8.csv")[1]
    assert (a / "run_seed7.state.bin").read_bytes() == (b / "run_seed7.state.bin").read_bytes()
    assert load_state(a / "run_seed7.state.bin").shape == (4, 3)
    summary = json.loads((a / "summary.json").read_text())
    assert summary["points"][0]["final_loss"] == read_metrics_csv(a / "run_seed7.csv")[-1].loss
    capsys.readouterr()


def test_thread_env_does_not_change_results(tmp_path, monkeypatch):
    cfg_text = RUN_CFG + "run.threads = 4\n"
    cfg = write_cfg(tmp_path / "r.cfg", cfg_text)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "t4")]) == 0
    monkeypatch.setenv("PRIVSGP_THREADS", "1")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "t1")]) == 0
    assert metric_rows(tmp_path / "t4" / "run_seed0.csv")[1] == metric_rows(tmp_path / "t1" / "run_seed0.csv")[1]
    monkeypatch.setenv("PRIVSGP_THREADS", "0")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "t0")]) == 2
