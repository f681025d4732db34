import json
import os

import numpy as np
import pytest

from coneflow.cli import (DEFAULT_EPSILON_SCHEDULE, main, parse_config,
                          parse_config_dict)
from coneflow.errors import ConfigurationError
from coneflow.fibration_model import model_to_json_dict, product_model


@pytest.fixture()
def model_file(tmp_path):
    path = tmp_path / "product.json"
    path.write_text(json.dumps(model_to_json_dict(product_model(), grid_n=64)))
    return str(path)


def write_config(tmp_path, model_file, **overrides):
    cfg = {"model": os.path.basename(model_file), "grid_n": 64}
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_parse_config_defaults(tmp_path, model_file):
    cfg = parse_config(write_config(tmp_path, model_file))
    assert cfg.grid_n == 64
    assert cfg.epsilon_schedule == DEFAULT_EPSILON_SCHEDULE
    assert cfg.flow["T"] == 20.0
    assert cfg.flow["dt"] == 0.05
    assert cfg.flow["scheme"] == "backward-euler-newton"
    assert cfg.masks["sigma_levels"] == [0.2, 0.4, 0.6]


def test_parse_config_unknown_key(tmp_path, model_file):
    path = write_config(tmp_path, model_file, grdi_n=32)
    with pytest.raises(ConfigurationError, match="grdi_n"):
        parse_config(path)


def test_parse_config_nested_unknown_key(tmp_path, model_file):
    path = write_config(tmp_path, model_file, flow={"dtx": 1})
    with pytest.raises(ConfigurationError, match="flow.dtx"):
        parse_config(path)


def test_parse_config_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError, match="malformed"):
        parse_config(path)


def test_parse_config_round_trip(tmp_path, model_file):
    cfg = parse_config(write_config(tmp_path, model_file,
                                    epsilon_schedule=[0.4, 0.2],
                                    flow={"T": 5.0, "dt": 0.1},
                                    output_dir="artifacts", seed=7))
    again = parse_config_dict(cfg.to_json_dict(), base_dir=".")
    assert again == cfg


def test_model_beta_range_error(tmp_path):
    path = tmp_path / "bad_model.json"
    path.write_text(json.dumps({"beta": 1.2, "delta": 0.1,
                                "cone_point": [0.5, 0.5]}))
    rc = main(["model", "check", "--model", str(path)])
    assert rc == 1


def test_model_check_product(capsys, model_file, tmp_path):
    rc = main(["model", "check", "--model", model_file, "--grid-n", "64",
               "--out", str(tmp_path / "out")])
    out = capsys.readouterr().out
    assert rc == 0
    area = float([l for l in out.splitlines() if l.startswith("A =")][0]
                 .split("=")[1])
    assert area == pytest.approx(np.pi, abs=1e-12)
    assert "W = 0" in out
    assert "p_star = 2" in out


def test_solve_ke_writes_artifacts(model_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["solve-ke", "--model", model_file, "--grid-n", "64",
               "--out", str(out)])
    assert rc == 0
    assert sorted(p.name for p in out.iterdir()) == \
        ["ke_report.json", "ke_solution.csv"]
    report = json.loads((out / "ke_report.json").read_text())
    assert report["A"] == pytest.approx(np.pi)
    assert report["residual"] <= 1e-9
    assert report["epsilons"] == list(DEFAULT_EPSILON_SCHEDULE)


def test_solve_ke_deterministic(model_file, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert main(["solve-ke", "--model", model_file, "--grid-n", "64",
                     "--out", str(out)]) == 0
    for name in ("ke_report.json", "ke_solution.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_flow_run_artifacts_and_gaps(model_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["flow", "run", "--model", model_file, "--grid-n", "64",
               "--T", "6", "--dt", "0.05", "--epsilon", "0.1",
               "--out", str(out)])
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["decay_report.json", "final_phi.csv", "final_phi.pgm",
                     "trajectory.csv"]
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0].startswith("t,gap[")
    assert len(lines) == 1 + 120
    decay = json.loads((out / "decay_report.json").read_text())
    fit = decay["qr>=0.1"]
    assert -1.15 < fit["slope"] < -0.85


def test_flow_run_rk4_guard_violation(model_file, tmp_path, capsys):
    rc = main(["flow", "run", "--model", model_file, "--grid-n", "64",
               "--T", "1", "--dt", "0.05", "--epsilon", "0.1",
               "--scheme", "rk4-explicit", "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert rc == 1
    assert "stability guard" in err


def test_cli_requires_model_or_config(capsys):
    rc = main(["solve-ke"])
    assert rc == 1
    assert "either --config or --model" in capsys.readouterr().err


def test_periods_subcommand(tmp_path, capsys):
    src = tmp_path / "curves.csv"
    src.write_text("# g2, g3 (real pairs)\n4,0\n0,4\n")
    out = tmp_path / "out"
    rc = main(["periods", "--input", str(src), "--out", str(out)])
    assert rc == 0
    lines = (out / "periods.csv").read_text().splitlines()
    assert len(lines) == 3
    row = [float(v) for v in lines[1].split(",")]
    # (g2, g3) = (4, 0): tau = i, disc = 64
    assert row[8] == pytest.approx(0.0, abs=1e-12)
    assert row[9] == pytest.approx(1.0, abs=1e-12)
    assert row[10] == pytest.approx(64.0)


def test_no_writes_outside_output_dir(model_file, tmp_path, monkeypatch):
    out = tmp_path / "only_here"
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    rc = main(["solve-ke", "--model", model_file, "--grid-n", "64",
               "--out", str(out)])
    assert rc == 0
    assert list(work.iterdir()) == []


@pytest.mark.slow
def test_verify_all_quick_product(model_file, tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["verify", "all", "--model", model_file, "--grid-n", "128",
               "--out", str(out)])
    printed = capsys.readouterr().out
    report = json.loads((out / "verification_report.json").read_text())
    assert sorted(report) == ["F-Lp", "eq-3.10", "lemma-3.2", "lemma-3.4",
                              "prop-2.1-holder", "prop-3.7", "thm-1.1-2"]
    for key, entry in report.items():
        assert entry["passed"], (key, entry)
    assert rc == 0
    assert printed.count("pass") == 7
