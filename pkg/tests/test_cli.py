from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holderflow.cli import ExperimentConfig, main, parse_queries, run


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_simulate_writes_paths_and_manifest(tmp_path, capsys):
    out = tmp_path / "sim"
    code = main(["simulate", "--drift", "linear:a=-1", "--T", "0.1", "--dt", "0.01", "--paths", "5", "--out", str(out)])
    assert code == 0
    m = _manifest(out)
    assert m["status"] == "ok" and m["failure_stage"] is None
    assert m["config"]["paths"] == 5 and m["master_seed"] == 0
    assert "wall_clock_s" in m and m["version"]
    rows = (out / "paths.csv").read_text().splitlines()
    assert rows[0] == "path,t,x0"
    assert len(rows) == 1 + 5 * 11
    assert json.loads(capsys.readouterr().out)["status"] == "ok"


def test_negative_values_are_accepted(tmp_path):
    out = tmp_path / "r"
    code = main(["resolve", "--drift", "const:c=1", "--lambda", "5", "--queries", "-1:1:3", "--paths", "100", "--out", str(out)])
    assert code == 0
    psi = np.loadtxt(out / "psi.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(psi[:, 2], 0.2, atol=1e-12)


@pytest.mark.parametrize(
    "argv, key",
    [
        (["simulate", "--dt", "0.3"], "dt"),
        (["simulate", "--drift", "bogus"], "drift"),
        (["simulate", "--paths", "0"], "paths"),
        (["resolve", "--queries", "a:b:c"], "queries"),
        (["select-lambda", "--ladder", "5,2"], "ladder"),
        (["bel", "--f", "cube"], "f"),
        (["flow", "--u", "3"], "u"),
    ],
)
def test_config_errors_exit_2_with_manifest(tmp_path, argv, key, capsys):
    out = tmp_path / "bad"
    assert main([*argv, "--out", str(out)]) == 2
    m = _manifest(out)
    assert m["status"] == "config_error"
    assert m["offending_key"] == key
    assert key in capsys.readouterr().err


def test_numerical_abort_exits_3(tmp_path):
    out = tmp_path / "boom"
    code = main(["simulate", "--drift", "linear:a=100000", "--T", "1", "--dt", "0.01", "--paths", "2", "--out", str(out)])
    assert code == 3
    m = _manifest(out)
    assert m["status"] == "numerical_abort"
    assert m["failure_stage"].startswith("simulate")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"drift": "linear:a=-2", "paths": 50, "T": 0.1, "dt": 0.01}))
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--paths", "3", "--out", str(out)]) == 0
    m = _manifest(out)
    assert m["config"]["paths"] == 3 and m["config"]["drift"] == "linear:a=-2"
    cfg.write_text(json.dumps({"paths": 5, "colour": "red"}))
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 2


@settings(max_examples=20, deadline=None)
@given(
    paths=st.integers(1, 10_000),
    dt=st.floats(1e-4, 0.5),
    drift=st.sampled_from(["zero", "linear:a=-1", "holder:theta=0.5,scale=1"]),
    x=st.lists(st.floats(-5, 5), min_size=1, max_size=3),
)
def test_config_round_trips_through_dict(paths, dt, drift, x):
    cfg = ExperimentConfig(paths=paths, dt=dt, drift=drift, x=x, dim=len(x))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize(
    "text, dim, n",
    [("-1:1:3", 1, 3), ("-1:1:3", 2, 9), ("0.5,1.5", 1, 2), ("0 1;2 3", 2, 2)],
)
def test_parse_queries(text, dim, n):
    pts = parse_queries(text, dim)
    assert pts.shape == (n, dim)


def test_csv_payloads_are_identical_across_workers(tmp_path):
    argv = ["bel", "--drift", "linear:a=-1", "--f", "sq", "--t", "0.2", "--dt", "0.01", "--paths", "300", "--chunk", "64"]
    payloads = []
    for w in (1, 4):
        out = tmp_path / f"w{w}"
        assert main([*argv, "--workers", str(w), "--out", str(out)]) == 0
        payloads.append((out / "bel.csv").read_bytes())
    assert payloads[0] == payloads[1]


def test_check_hypotheses_subcommand(tmp_path):
    manifest, code = run(ExperimentConfig(subcommand="check-hypotheses", drift="holder:theta=0.5", probes=32, out=str(tmp_path)))
    assert code == 0
    assert manifest["checks"]["hypotheses_ok"]
    assert (tmp_path / "hypotheses.csv").exists()


def test_flow_subcommand_direct_route(tmp_path):
    out = tmp_path / "f"
    code = main(["flow", "--direct", "--drift", "linear:a=-1", "--T", "0.1", "--dt", "0.01", "--paths", "4", "--out", str(out)])
    assert code == 0
    header = (out / "flow.csv").read_text().splitlines()[0]
    assert header == "path,t,x0,dphi0"
    assert _manifest(out)["metrics"]["via_transform"] is False


def test_suite_subset_reports_acceptance(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["suite", "--only", "2", "--out", str(out)]) == 0
    assert "PASS acceptance  2" in capsys.readouterr().out
    assert _manifest(out)["checks"] == {"acceptance_2": True}
