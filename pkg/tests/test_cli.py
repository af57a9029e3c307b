import json
import subprocess
import sys

import numpy as np
import pytest

import pdmpruin.cli as cli
from pdmpruin.cli import (
    EXIT_COMPARISON,
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    closed_form_gates,
    count_mc_violations,
    main,
)
from pdmpruin.passage_model import SolutionCurve
from pdmpruin.serialization import (
    ConfigError,
    config_to_dict,
    load_config_file,
    parse_config,
)

FIG1_CONFIG = {
    "schema_version": "1",
    "model": {
        "drift": {"kind": "segerdahl", "K": 0.75, "lam": 0.5, "q": 0.5, "mu": 1.5},
        "jump_rate": 0.5,
        "kill_rate": 0.5,
        "jumps": {"beta": [1.0], "B": [[-1.5]]},
        "jump_direction": "downward",
    },
    "problem": {"lower": 0.0, "upper": None, "estimand": "ruin_below", "overshoot_xi": 0.0},
    "grid": {"start": 0.0, "stop": 5.0, "points": 41},
    "sim": {"x0": 1.0, "n_paths": 5000, "seed": 7},
}

CONST_CONFIG = {
    "schema_version": "1",
    "model": {
        "drift": {"kind": "constant", "c": 1.0},
        "jump_rate": 1.0,
        "kill_rate": 0.0,
        "jumps": {"beta": [1.0], "B": [[-2.0]]},
    },
    "problem": {"lower": 0.0},
    "grid": {"start": 0.0, "stop": 5.0, "points": 21},
    "sim": {"x0": 1.0, "n_paths": 4000, "seed": 3, "max_time": 60.0},
}


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


class TestConfigParsing:
    def test_round_trip(self):
        rc = parse_config(FIG1_CONFIG)
        again = parse_config(config_to_dict(rc))
        assert config_to_dict(again) == config_to_dict(rc)

    def test_unknown_top_level_field(self):
        bad = dict(FIG1_CONFIG, extra=1)
        with pytest.raises(ConfigError, match="unknown"):
            parse_config(bad)

    def test_bad_schema_version(self):
        bad = dict(FIG1_CONFIG, schema_version="99")
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config(bad)

    def test_unknown_model_field_carries_path(self):
        bad = json.loads(json.dumps(FIG1_CONFIG))
        bad["model"]["bogus"] = 1
        with pytest.raises(ConfigError) as e:
            parse_config(bad)
        assert e.value.path == "$.model"

    def test_missing_model(self):
        with pytest.raises(ConfigError, match="model"):
            parse_config({"schema_version": "1"})

    def test_grid_validation(self):
        bad = json.loads(json.dumps(FIG1_CONFIG))
        bad["grid"] = {"start": 2.0, "stop": 1.0, "points": 5}
        with pytest.raises(ConfigError):
            parse_config(bad)

    def test_bad_json_file(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="line"):
            load_config_file(str(p))


class TestDispatchGates:
    def test_constant_drift_closed_form(self):
        rc = parse_config(CONST_CONFIG)
        grid = rc.grid.array()
        curve, reasons = closed_form_gates(rc.model, rc.problem, grid)
        assert curve is not None and curve.method == "closed_form"
        assert curve.psi[0] == pytest.approx(0.5)

    def test_relaxing_drift_closed_form(self):
        rc = parse_config(FIG1_CONFIG)
        curve, _ = closed_form_gates(rc.model, rc.problem, rc.grid.array())
        assert curve is not None and curve.method == "closed_form"
        assert curve.psi[0] == 1.0

    def test_mismatched_family_rates_fall_through(self):
        cfg = json.loads(json.dumps(FIG1_CONFIG))
        cfg["model"]["drift"]["q"] = 0.25  # drift family != model kill rate
        rc = parse_config(cfg)
        curve, reasons = closed_form_gates(rc.model, rc.problem, rc.grid.array())
        assert curve is None
        assert any("rates matching" in r for r in reasons)

    def test_perturbed_tabulated_drift_falls_to_bvp(self, tmp_path):
        xs = np.linspace(-1.0, 8.0, 400)
        base = 0.5 + 0.5
        phi = (base / 1.5) * (0.75 * np.exp(-2 * 1.5 * xs) - 1.0) + 0.01 * np.sin(xs)
        cfg = json.loads(json.dumps(FIG1_CONFIG))
        cfg["model"]["drift"] = {
            "kind": "tabulated",
            "x": list(xs),
            "values": list(phi),
            "sign_domain": [0.0, 8.0],
        }
        rc = parse_config(cfg)
        curve, reasons = closed_form_gates(rc.model, rc.problem, rc.grid.array())
        assert curve is None
        path = write_config(tmp_path, cfg)
        out = str(tmp_path / "sol")
        assert main(["solve", "--config", path, "--output", out, "--quiet"]) == EXIT_OK
        text = (tmp_path / "sol.csv").read_text()
        assert "ode_bvp" in text


class TestExitCodes:
    def test_solve_ok(self, tmp_path):
        path = write_config(tmp_path, FIG1_CONFIG)
        out = str(tmp_path / "s")
        assert main(["solve", "--config", path, "--output", out, "--quiet"]) == EXIT_OK

    def test_missing_config_is_usage_error(self):
        assert main(["solve", "--config", "/no/such/file.json"]) == EXIT_CONFIG

    def test_unknown_field_is_usage_error(self, tmp_path):
        path = write_config(tmp_path, dict(FIG1_CONFIG, junk=1))
        assert main(["solve", "--config", path]) == EXIT_CONFIG

    def test_argparse_usage_error(self, capsys):
        assert main(["no-such-subcommand"]) == EXIT_CONFIG
        capsys.readouterr()

    def test_impossible_problem_is_numerical_error(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(FIG1_CONFIG))
        cfg["problem"]["upper"] = 2.0
        cfg["problem"]["estimand"] = "exit_above"
        cfg["grid"] = {"start": 0.0, "stop": 2.0, "points": 11}
        path = write_config(tmp_path, cfg)
        assert main(["solve", "--config", path, "--quiet"]) == EXIT_NUMERICAL
        assert "impossible" in capsys.readouterr().err

    def test_single_method_compare_fails(self, tmp_path, capsys):
        # upward jumps: no closed form and no ratio oracle, one method only
        cfg = json.loads(json.dumps(CONST_CONFIG))
        cfg["model"]["jump_direction"] = "upward"
        cfg["problem"] = {"lower": 0.0, "upper": 3.0, "estimand": "ruin_below"}
        cfg["grid"] = {"start": 0.0, "stop": 3.0, "points": 11}
        path = write_config(tmp_path, cfg)
        rcode = main(["compare", "--config", path, "--quiet", "--paths", "10"])
        assert rcode == EXIT_NUMERICAL
        assert "nothing to compare" in capsys.readouterr().err


class TestCompare:
    def test_violation_counter(self):
        vals = np.array([0.5, 0.6, 0.7])
        means = np.array([0.5, 0.59, 0.9])
        errs = np.array([0.01, 0.01, 0.01])
        assert count_mc_violations(vals, means, errs) == 1

    def test_comparison_failure_exit_code(self, tmp_path, monkeypatch):
        # corrupt the closed form: compare must detect the MC mismatch
        def corrupted(model, problem, grid):
            psi = 0.5 * np.exp(-np.asarray(grid))
            return SolutionCurve(grid, psi + 0.2, psi[:, None] * 2, "closed_form"), []

        monkeypatch.setattr(cli, "closed_form_gates", corrupted)
        path = write_config(tmp_path, CONST_CONFIG)
        rcode = main(
            ["compare", "--config", path, "--quiet", "--paths", "4000", "--mc-points", "4"]
        )
        assert rcode == EXIT_COMPARISON

    def test_constant_drift_compare_ok(self, tmp_path):
        path = write_config(tmp_path, CONST_CONFIG)
        out = str(tmp_path / "cmp")
        rcode = main(
            ["compare", "--config", path, "--output", out, "--quiet",
             "--paths", "4000", "--mc-points", "4"]
        )
        assert rcode == EXIT_OK
        header = (tmp_path / "cmp.csv").read_text().splitlines()[0]
        assert header.startswith("x,psi_")
        assert "mc_mean" in header

    def test_relaxing_drift_compare_within_mc_band(self, tmp_path, capsys):
        path = write_config(tmp_path, FIG1_CONFIG)
        rcode = main(["compare", "--config", path, "--paths", "5000", "--mc-points", "5"])
        assert rcode == EXIT_OK
        out = capsys.readouterr().out
        assert "0 MC violations" in out
        assert "psi_closed_form" in out and "psi_ode_bvp" in out


class TestSubcommands:
    def test_check_solvability_output(self, tmp_path, capsys):
        path = write_config(tmp_path, FIG1_CONFIG)
        out = str(tmp_path / "closure.json")
        assert main(["check-solvability", "--config", path, "--output", out]) == EXIT_OK
        text = capsys.readouterr().out
        assert "dimension 4, non-solvable" in text
        assert "gl(2,R)" in text
        data = json.loads((tmp_path / "closure.json").read_text())
        assert data["dimension"] == 4
        assert data["derived_series_dims"] == [4, 3, 3]

    def test_check_solvability_zero_kill(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(FIG1_CONFIG))
        cfg["model"]["kill_rate"] = 0.0
        cfg["model"]["drift"]["q"] = 0.0
        path = write_config(tmp_path, cfg)
        assert main(["check-solvability", "--config", path]) == EXIT_OK
        text = capsys.readouterr().out
        assert "dimension 2, solvable" in text
        assert "two-dimensional family" in text

    def test_check_solvability_erlang(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(CONST_CONFIG))
        cfg["model"]["drift"] = {"kind": "segerdahl", "K": -1.0, "lam": 1.0, "q": 0.0, "mu": 1.0}
        cfg["model"]["jumps"] = {"beta": [1.0, 0.0], "B": [[-1.0, 1.0], [0.0, -1.0]]}
        path = write_config(tmp_path, cfg)
        assert main(["check-solvability", "--config", path]) == EXIT_OK
        assert "dimension" in capsys.readouterr().out

    def test_check_integrability(self, tmp_path, capsys):
        path = write_config(tmp_path, FIG1_CONFIG)
        out = str(tmp_path / "gate.json")
        assert main(["check-integrability", "--config", path, "--output", out]) == EXIT_OK
        assert "integrable" in capsys.readouterr().out
        data = json.loads((tmp_path / "gate.json").read_text())
        assert data["integrable"] is True
        assert abs(data["params"]["c1"]) < 1e-8

    def test_simulate(self, tmp_path, capsys):
        path = write_config(tmp_path, FIG1_CONFIG)
        out = str(tmp_path / "est")
        code = main(["simulate", "--config", path, "--paths", "2000", "--output", out])
        assert code == EXIT_OK
        data = json.loads((tmp_path / "est.json").read_text())
        assert 0.0 <= data["mean"] <= 1.0
        assert data["n_paths"] == 2000
        capsys.readouterr()

    def test_simulate_csv_row(self, tmp_path, capsys):
        path = write_config(tmp_path, FIG1_CONFIG)
        out = str(tmp_path / "est.csv")
        assert main(["simulate", "--config", path, "--paths", "1000",
                     "--output", out, "--quiet"]) == EXIT_OK
        lines = (tmp_path / "est.csv").read_text().splitlines()
        assert lines[0].startswith("x0,mean,std_error")
        assert len(lines) == 2
        assert lines[1].endswith("psi_q")
        capsys.readouterr()

    def test_quiet_suppresses_output(self, tmp_path, capsys):
        path = write_config(tmp_path, FIG1_CONFIG)
        main(["check-integrability", "--config", path, "--quiet"])
        assert capsys.readouterr().out == ""


class TestFigure1:
    def test_outputs_and_boundary_values(self, tmp_path, capsys):
        assert main(["figure1", "--output-dir", str(tmp_path)]) == EXIT_OK
        capsys.readouterr()
        ruin = (tmp_path / "figure1_ruin.csv").read_text()
        lines = ruin.splitlines()
        assert lines[0] == "x,psi,m_1,method"
        assert lines[1] == "0,1,1,closed_form"
        drift = (tmp_path / "figure1_drift.csv").read_text().splitlines()
        assert drift[1] == "0,-0.16666666666666666"

    def test_rerun_byte_identical(self, tmp_path, capsys):
        main(["figure1", "--output-dir", str(tmp_path / "a"), "--quiet"])
        main(["figure1", "--output-dir", str(tmp_path / "b"), "--quiet"])
        capsys.readouterr()
        for name in ("figure1_ruin.csv", "figure1_drift.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_emitted_config_reproduces_curve(self, tmp_path, capsys):
        cfg_path = str(tmp_path / "emitted.json")
        main(["figure1", "--output-dir", str(tmp_path), "--quiet",
              "--emit-config", cfg_path])
        out = str(tmp_path / "resolved")
        assert main(["solve", "--config", cfg_path, "--output", out, "--quiet"]) == EXIT_OK
        capsys.readouterr()
        a = (tmp_path / "figure1_ruin.csv").read_text().splitlines()
        b = (tmp_path / "resolved.csv").read_text().splitlines()
        assert a == b

    def test_far_field_log_slope(self, tmp_path, capsys):
        # the tail of the emitted curve decays at the known exponential rate
        assert main(["figure1", "--output-dir", str(tmp_path), "--quiet",
                     "--x-max", "30", "--points", "601"]) == EXIT_OK
        capsys.readouterr()
        rows = (tmp_path / "figure1_ruin.csv").read_text().splitlines()[1:]
        x1, p1 = map(float, rows[-21].split(",")[:2])
        x2, p2 = map(float, rows[-1].split(",")[:2])
        slope = (np.log(p2) - np.log(p1)) / (x2 - x1)
        assert abs(slope - (-0.4393398282201786)) / 0.4393398282201786 < 0.01

    def test_console_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "pdmpruin.cli", "figure1", "--quiet",
             "--output-dir", str(tmp_path)],
            capture_output=True,
        )
        assert proc.returncode == 0
        assert (tmp_path / "figure1_ruin.csv").exists()
