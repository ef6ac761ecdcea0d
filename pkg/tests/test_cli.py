import json

import numpy as np
import pytest

from ctrlgeom.cli import main


PENDULUM = """
[system]
n = 2
m = 1
states = ["x1", "x2"]
drift = ["x2", "-sin(x1)"]
controls = [["0", "1"]]

[manifold]
ind = [1]
dep = [2]
h = ["-0.5*x1"]

[solver]
lambda = 2.0
x0 = [1.0, 1.0]
t_final = 5.0
grid = {{ box = [[-3.0, 3.0], [-3.0, 3.0]], step = 0.5 }}
arc_step = 0.05
n_continuation_steps = 90

[output]
dir = "{out}"
"""

SADDLE_NODE = """
[system]
n = 2
m = 1
states = ["x1", "x2"]
drift = ["x1^2 + x2", "0"]
controls = [["0", "1"]]

[manifold]
ind = [1]
dep = [2]
h = ["-mu"]
mu = "mu"

[solver]
grid = {{ box = [[-2.0, 2.0], [-2.0, 2.0]], step = 0.5 }}
seeds = [[-1.5, 0.0], [-0.5, 0.0], [0.5, 0.0], [1.5, 0.0]]
mu_range = [-1.0, 1.0]
n_mu = 41
match_radius = 0.4

[output]
dir = "{out}"
"""


def write_config(tmp_path, template, name="run.toml"):
    out = tmp_path / "out"
    path = tmp_path / name
    path.write_text(template.format(out=str(out).replace("\\", "/")))
    return path, out


class TestCheck:
    def test_valid_config(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, PENDULUM)
        assert main(["check", "--config", str(path)]) == 0
        assert "config OK" in capsys.readouterr().out

    def test_overlapping_split_is_reported(self, tmp_path, capsys):
        bad = PENDULUM.replace("ind = [1]", "ind = [1, 2]")
        path, _ = write_config(tmp_path, bad)
        assert main(["check", "--config", str(path)]) == 1
        err = capsys.readouterr().err
        assert "overlap" in err and "2" in err

    def test_missing_state_name(self, tmp_path, capsys):
        bad = PENDULUM.replace('"-sin(x1)"', '"-sin(theta)"')
        path, _ = write_config(tmp_path, bad)
        assert main(["check", "--config", str(path)]) == 1
        assert "theta" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["check", "--config", str(tmp_path / "nope.toml")]) == 1

    def test_unknown_flag_exits_one(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, PENDULUM)
        assert main(["check", "--config", str(path), "--frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_one(self, capsys):
        assert main(["explode"]) == 1
        assert "usage" in capsys.readouterr().err


class TestSigmaCommand:
    def test_pendulum_curve_and_certificate(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["sigma", "--config", str(path), "--quiet", "--no-plot"]) == 0
        rows = (out / "sigma.csv").read_text().strip().splitlines()
        assert rows[0] == "x1,x2,residual_norm"
        for row in rows[1:]:
            x1, x2, res = (float(v) for v in row.split(","))
            assert abs(x2) < 1e-8
        report = json.loads((out / "sigma.json").read_text())
        assert report["certificate"]["dimension"] == 1
        assert report["certificate"]["certified"] is True
        assert report["kind"] == "curve"
        # the bidirectional trace covers the scan box
        xs = [float(r.split(",")[0]) for r in rows[1:]]
        assert min(xs) < -3.0 and max(xs) > 3.0

    def test_figure_rendered_by_default(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["sigma", "--config", str(path), "--quiet"]) == 0
        assert (out / "sigma.png").exists()

    def test_no_plot_skips_figure(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["sigma", "--config", str(path), "--quiet", "--no-plot"]) == 0
        assert not (out / "sigma.png").exists()


STRICT = """
[system]
n = 2
m = 1
states = ["x1", "x2"]
drift = ["x1^2 + x2", "0"]
controls = [["0", "1"]]
strict_feedback = true
f = ["x1^2", "0"]
g = ["1", "1"]

[solver]
grid = {{ box = [[-2.0, 2.0], [-2.0, 2.0]], step = 0.25 }}

[output]
dir = "{out}"
"""


class TestStrictFeedbackConfig:
    def test_sigma_uses_graph_route(self, tmp_path):
        path, out = write_config(tmp_path, STRICT)
        assert main(["sigma", "--config", str(path), "--quiet", "--no-plot"]) == 0
        report = json.loads((out / "sigma.json").read_text())
        assert report["kind"] == "graph"
        assert report["certificate"]["dimension"] == 1
        rows = (out / "sigma.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            x1, x2, _ = (float(v) for v in row.split(","))
            assert x2 == pytest.approx(-(x1**2), abs=1e-12)

    def test_mismatched_f_g_rejected(self, tmp_path, capsys):
        bad = STRICT.replace('f = ["x1^2", "0"]', 'f = ["x1^3", "0"]')
        path, _ = write_config(tmp_path, bad)
        assert main(["check", "--config", str(path)]) == 1
        assert "reproduce the declared drift" in capsys.readouterr().err


class TestDeterminism:
    def test_byte_identical_reruns(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        args = ["sigma", "--config", str(path), "--quiet", "--no-plot"]
        assert main(args) == 0
        first = {name: (out / name).read_bytes() for name in ("sigma.csv", "sigma.json")}
        assert main(args) == 0
        second = {name: (out / name).read_bytes() for name in ("sigma.csv", "sigma.json")}
        assert first == second

    def test_float_format_17_digits(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["stratify", "--config", str(path), "--quiet", "--no-plot",
                     "--rank-tol", "1e-11"]) == 0
        report = (out / "stratify.json").read_text()
        assert '"rank_tol": 9.9999999999999994e-12' in report


class TestOverrides:
    def test_solver_flags_echoed(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main([
            "stratify", "--config", str(path), "--quiet", "--no-plot",
            "--tol", "1e-8", "--rank-tol", "1e-9", "--max-iter", "33",
            "--arc-step", "0.125", "--lambda", "3.5", "--rtol", "1e-7",
            "--atol", "1e-8", "--t-final", "2.5", "--n-report", "101",
        ]) == 0
        solver = json.loads((out / "stratify.json").read_text())["solver"]
        assert solver["tol"] == 1e-8
        assert solver["rank_tol"] == 1e-9
        assert solver["max_iter"] == 33
        assert solver["arc_step"] == 0.125
        assert solver["lambda"] == 3.5
        assert solver["rtol"] == 1e-7
        assert solver["atol"] == 1e-8
        assert solver["t_final"] == 2.5
        assert solver["n_report"] == 101

    def test_grid_flag(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["stratify", "--config", str(path), "--quiet", "--no-plot",
                     "--grid=-1:1:1.0"]) == 0
        rows = (out / "stratify.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 9  # header + 3x3 grid broadcast to both axes

    def test_bad_grid_flag(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, PENDULUM)
        assert main(["stratify", "--config", str(path), "--grid", "1:0:0.5"]) == 1

    def test_out_flag_overrides_config(self, tmp_path):
        path, _ = write_config(tmp_path, PENDULUM)
        alt = tmp_path / "elsewhere"
        assert main(["stratify", "--config", str(path), "--quiet", "--no-plot",
                     "--out", str(alt)]) == 0
        assert (alt / "stratify.csv").exists()


class TestStratifyCommand:
    def test_pendulum_regular(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["stratify", "--config", str(path), "--quiet", "--no-plot"]) == 0
        report = json.loads((out / "stratify.json").read_text())
        assert report["regular_fraction"] == 1.0
        rows = (out / "stratify.csv").read_text().strip().splitlines()
        assert rows[0] == "x1,x2,corank"
        assert len(rows) == 1 + 13 * 13


class TestTransverseCommand:
    def test_pendulum_equilibrium_report(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["transverse", "--config", str(path), "--quiet", "--no-plot"]) == 0
        report = json.loads((out / "equilibria.json").read_text())
        assert len(report["equilibria"]) == 1
        entry = report["equilibria"][0]
        assert abs(entry["point"][0]) < 1e-8 and abs(entry["point"][1]) < 1e-8
        assert entry["index"] == 0
        assert entry["isolated"] is True
        assert entry["eigenvalues"][0][0] == pytest.approx(-0.5, abs=1e-6)
        rows = (out / "transverse.csv").read_text().strip().splitlines()
        assert rows[0] == "x1,x2,leading_re,index,isolated,margin_D,margin_sigma"


class TestDesignCommand:
    def test_pendulum_trajectory(self, tmp_path):
        path, out = write_config(tmp_path, PENDULUM)
        assert main(["design", "--config", str(path), "--quiet", "--no-plot"]) == 0
        rows = (out / "trajectory.csv").read_text().strip().splitlines()
        assert rows[0] == "t,x1,x2,u1,s_norm"
        report = json.loads((out / "design.json").read_text())
        assert report["complete"] is True
        assert report["final_distance"] < 1e-3
        s0 = report["initial_distance"]
        assert report["final_distance"] < s0 * np.exp(-2.0 * 5.0) * 1.05

    def test_missing_x0_is_validation_error(self, tmp_path, capsys):
        no_x0 = PENDULUM.replace("x0 = [1.0, 1.0]\n", "")
        path, _ = write_config(tmp_path, no_x0)
        assert main(["design", "--config", str(path), "--quiet", "--no-plot"]) == 1
        assert "x0" in capsys.readouterr().err


MULTI_INPUT = """
[system]
n = 3
m = 2
states = ["x1", "x2", "x3"]
drift = ["x1^2 + x3", "0", "0"]
controls = [["0", "1", "0"], ["0", "0", "1"]]

[solver]
grid = {{ box = [[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]], step = 0.5 }}

[output]
dir = "{out}"
"""


class TestMultiInputSigma:
    def test_cloud_route_for_two_inputs(self, tmp_path):
        path, out = write_config(tmp_path, MULTI_INPUT)
        assert main(["sigma", "--config", str(path), "--quiet", "--no-plot"]) == 0
        report = json.loads((out / "sigma.json").read_text())
        assert report["kind"] == "cloud"
        assert report["certificate"]["dimension"] == 2
        rows = (out / "sigma.csv").read_text().strip().splitlines()
        assert rows[0] == "x1,x2,x3,residual_norm"
        for row in rows[1:]:
            x1, x2, x3, _ = (float(v) for v in row.split(","))
            assert abs(x3 + x1**2) < 1e-8


NO_EQUILIBRIA = """
[system]
n = 2
m = 1
states = ["x1", "x2"]
drift = ["1", "0"]
controls = [["0", "1"]]

[manifold]
ind = [1]
dep = [2]
h = ["-0.5*x1"]

[solver]
grid = {{ box = [[-1.0, 1.0], [-1.0, 1.0]], step = 1.0 }}

[output]
dir = "{out}"
"""


class TestEmptyEquilibria:
    def test_transverse_report_with_no_roots(self, tmp_path):
        # constant drift orthogonal to the control span: no equilibria anywhere
        path, out = write_config(tmp_path, NO_EQUILIBRIA)
        assert main(["transverse", "--config", str(path), "--quiet", "--no-plot"]) == 0
        report = json.loads((out / "equilibria.json").read_text())
        assert report["equilibria"] == []
        rows = (out / "transverse.csv").read_text()
        assert rows.strip() == "x1,x2,leading_re,index,isolated,margin_D,margin_sigma"


class TestBifurcateCommand:
    def test_saddle_node_events(self, tmp_path):
        path, out = write_config(tmp_path, SADDLE_NODE)
        assert main(["bifurcate", "--config", str(path), "--quiet", "--no-plot"]) == 0
        report = json.loads((out / "events.json").read_text())
        folds = [e for e in report["events"] if e["type"] == "fold"]
        assert len(folds) == 1
        assert abs(folds[0]["mu"]) < 1e-6
        rows = (out / "diagram.csv").read_text().strip().splitlines()
        assert rows[0] == "mu,branch,x1,leading_re,idx,isolated"
        assert len(rows) > 10

    def test_mu_range_flag(self, tmp_path):
        path, out = write_config(tmp_path, SADDLE_NODE)
        assert main(["bifurcate", "--config", str(path), "--quiet", "--no-plot",
                     "--mu-range", "0.2:1:3"]) == 0
        rows = (out / "diagram.csv").read_text().strip().splitlines()[1:]
        mus = sorted({float(r.split(",")[0]) for r in rows})
        np.testing.assert_allclose(mus, [0.2, 0.6, 1.0])

    def test_unparametrized_manifold_rejected(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, PENDULUM)
        assert main(["bifurcate", "--config", str(path), "--quiet", "--no-plot"]) == 1
        assert "parametrized" in capsys.readouterr().err

    def test_seed_grid_flag_widens_the_search(self, tmp_path):
        # sin drift: equilibria of the induced dynamics at every x1 = k*pi.
        # A single configured seed finds one; grid seeding finds the rest.
        multi = """
[system]
n = 2
m = 1
states = ["x1", "x2"]
drift = ["sin(x1)", "-x2"]
controls = [["0", "1"]]

[manifold]
ind = [1]
dep = [2]
h = ["-0.5*x1"]

[solver]
grid = {{ box = [[-7.0, 7.0], [-7.0, 7.0]], step = 1.0 }}
seeds = [[0.1, 0.1]]

[output]
dir = "{out}"
"""
        path, out = write_config(tmp_path, multi)
        assert main(["transverse", "--config", str(path), "--quiet", "--no-plot"]) == 0
        single = (out / "transverse.csv").read_text().strip().splitlines()[1:]
        assert len(single) == 1
        assert main(["transverse", "--config", str(path), "--quiet", "--no-plot",
                     "--seed-grid"]) == 0
        many = (out / "transverse.csv").read_text().strip().splitlines()[1:]
        assert len(many) >= 5  # x1 = 0, +-pi, +-2pi inside the box


def test_module_entry_point(tmp_path):
    import subprocess
    import sys as _sys

    out = tmp_path / "out"
    config = tmp_path / "run.toml"
    config.write_text(PENDULUM.format(out=str(out).replace("\\", "/")))
    proc = subprocess.run(
        [_sys.executable, "-m", "ctrlgeom", "check", "--config", str(config)],
        capture_output=True, text=True, cwd="/root/pkg",
        env={"PYTHONPATH": "src", "PATH": "/usr/bin:/bin"},
    )
    assert proc.returncode == 0, proc.stderr
    assert "config OK" in proc.stdout


class TestNumericalFailureExitCode:
    def test_empty_sigma_scan_exits_two(self, tmp_path):
        # constant drift orthogonal to the control span: no singular points at all
        empty = NO_EQUILIBRIA
        path, out = write_config(tmp_path, empty)
        assert main(["sigma", "--config", str(path), "--quiet", "--no-plot"]) == 2
        rows = (out / "sigma.csv").read_text().strip().splitlines()
        assert rows == ["x1,x2,residual_norm"]

    def test_truncated_trajectory_exits_two(self, tmp_path):
        blowup = """
[system]
n = 2
m = 1
states = ["x1", "x2"]
drift = ["1 + x1^2", "0"]
controls = [["0", "1"]]

[manifold]
ind = [1]
dep = [2]
h = ["0"]

[solver]
x0 = [0.0, 0.5]
t_final = 5.0

[output]
dir = "{out}"
"""
        path, out = write_config(tmp_path, blowup)
        assert main(["design", "--config", str(path), "--quiet", "--no-plot"]) == 2
        report = json.loads((out / "design.json").read_text())
        assert report["complete"] is False
        assert report["diagnostic"]


class TestWarnings:
    def test_unused_manifold_block_warned(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, PENDULUM)
        assert main(["stratify", "--config", str(path), "--no-plot"]) == 0
        assert "ignoring [manifold]" in capsys.readouterr().err

    def test_quiet_suppresses_warning(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, PENDULUM)
        assert main(["stratify", "--config", str(path), "--no-plot", "--quiet"]) == 0
        assert "ignoring" not in capsys.readouterr().err

    def test_unknown_block_warned(self, tmp_path, capsys):
        extra = PENDULUM + "\n[mystery]\nvalue = 1\n"
        path, _ = write_config(tmp_path, extra)
        assert main(["check", "--config", str(path)]) == 0
        assert "unknown block [mystery]" in capsys.readouterr().err
