import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hessgame import fields
from hessgame.cli import main, run
from hessgame.config import load_config, loads_config, parse_data, parse_points
from hessgame.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """
[domain]
dim = 2
[operator]
k1 = 1
k2 = 1
[data]
g = harmonic_quadratic 1
f = constant 0
[solver]
h = 0.125
deltas = 0.2, 0
[mc]
dt = 2e-3
n_paths = 300
seed = 5
points = 0.3,0; 0,0.4
policy = constant
batch_size = 64
[quasi]
lam = 0.25
K1 = 5
n_paths = 200
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfig:
    def test_defaults(self):
        cfg = loads_config("[domain]\ndim = 3\n")
        assert cfg.domain.dim == 3 and cfg.spec.kind == "sum_extremes"
        assert cfg.solver.deltas == (0.0,) and cfg.mc.policy == "feedback"
        assert np.array_equal(cfg.mc.points, np.zeros((1, 3)))
        p = cfg.aux_params()
        assert p.lam == 0.5 and p.K1 == 1.0 and p.theta_b2 == pytest.approx(1 / 6)

    def test_examples_load(self):
        for name in ("example1.ini", "example2_degenerate.ini", "laplacian2d.ini"):
            load_config(CONFIGS / name)

    def test_ellipsoid(self):
        cfg = loads_config("[domain]\ndim = 2\nkind = ellipsoid\nsemi_axes = 1, 0.5\n")
        assert cfg.domain.semi_axes == (1.0, 0.5)

    @pytest.mark.parametrize("text", [
        "[domain]\n",
        "[domain]\ndim = 2\n[extra]\na = 1\n",
        "[domain]\ndim = 2\nbogus = 1\n",
        "[domain]\ndim = two\n",
        "[domain]\ndim = 2\nkind = torus\n",
        "[domain]\ndim = 2\nkind = ellipsoid\nsemi_axes = 1\n",
        "[domain]\ndim = 3\n[operator]\nkind = middle_sum\nk = 1\nj = 1\n",
        "[domain]\ndim = 2\n[operator]\nk1 = 3\nk2 = 1\n",
        "[domain]\ndim = 2\n[data]\ng = spline 1\n",
        "[domain]\ndim = 2\n[data]\nc = -1\n",
        "[domain]\ndim = 2\n[solver]\ndeltas = 0, 0.1\n",
        "[domain]\ndim = 2\n[solver]\nh = 2\n",
        "[domain]\ndim = 2\n[solver]\nghost = mirror\n",
        "[domain]\ndim = 2\n[mc]\npoints = 2, 0\n",
        "[domain]\ndim = 2\n[mc]\npoints = 0.9995, 0\n",
        "[domain]\ndim = 2\n[mc]\npoints = 0, 0, 0\n",
        "[domain]\ndim = 2\n[mc]\npolicy = greedy\n",
        "[domain]\ndim = 2\n[mc]\nn_paths = 1\n",
        "[domain]\ndim = 2\n[quasi]\ntheta_b2 = 0.5\n",
        "[domain]\ndim = 2\n[quasi]\nlam = 0.01\n",
        "[domain]\ndim = 2\n[quasi]\nK1 = 0.5\n",
        "not an ini file",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            loads_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_parse_points(self):
        pts = parse_points("0.1, 0.2; -0.3,0.4;", 2)
        assert pts.tolist() == [[0.1, 0.2], [-0.3, 0.4]]
        with pytest.raises(ConfigError):
            parse_points("0.1,0.2,0.3", 2)

    def test_parse_data(self):
        x = np.array([[0.5, -1.0, 2.0]])
        assert parse_data("constant 2.5", 3)(x)[0] == 2.5
        assert parse_data("harmonic_quadratic 2", 3)(x)[0] == 2 * (0.25 - 1)
        assert parse_data("linear 1,0,2 0.5", 3)(x)[0] == 0.5 + 4.5
        assert parse_data("polynomial 1:2,0,0; -1:0,0,2", 3)(x)[0] == 0.25 - 4
        assert isinstance(parse_data("constant", 3), fields.Polynomial)
        with pytest.raises(ConfigError):
            parse_data("harmonic_quadratic 1", 1)
        with pytest.raises(ConfigError):
            parse_data("linear", 3)


class TestCLI:
    def test_missing_config(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["verify", "--config", str(tmp_path / "missing.ini"), "--out", str(out)]) == 2
        assert not out.exists()
        assert "error" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = write(tmp_path, TINY.replace("seed = 5", "seed = 5\nspeed = 3"))
        out = tmp_path / "out"
        assert main(["solve", "--config", cfg, "--out", str(out)]) == 2
        assert not out.exists()

    def test_usage_errors(self, tmp_path, capsys):
        assert main(["explode", "--config", "x"]) == 2
        assert main(["solve"]) == 2
        assert main(["--help"]) == 0
        cfg = write(tmp_path, TINY)
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "0"]) == 2
        capsys.readouterr()

    def test_solve_outputs(self, tmp_path):
        cfg = write(tmp_path, TINY)
        out = tmp_path / "out"
        assert run("solve", cfg, str(out)) == 0
        names = sorted(os.listdir(out))
        assert names == ["continuation.csv", "diagnostics.txt", "field.csv", "report.txt"]
        report = (out / "report.txt").read_text()
        assert "vanishing-regularization limit" in report and "discrete Isaacs residual" in report
        assert (out / "field.csv").read_text().startswith("x1,x2,value")

    def test_simulate_threads_and_seed(self, tmp_path):
        cfg = write(tmp_path, TINY)
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert main(["simulate", "--config", cfg, "--out", str(a), "--threads", "1"]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(b), "--threads", "3"]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(c), "--seed", "6"]) == 0
        for name in ("simulate.csv", "moments.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "simulate.csv").read_bytes() != (c / "simulate.csv").read_bytes()
        header = (a / "simulate.csv").read_text().splitlines()[0]
        assert header == "x1,x2,n_paths,mean,stderr,mean_tau,bound_tau,step_limit_hits"

    def test_report_rows_carry_anchor(self, tmp_path):
        cfg = write(tmp_path, TINY)
        out = tmp_path / "out"
        code = run("report", cfg, str(out))
        lines = (out / "report.txt").read_text().splitlines()
        rows = [ln for ln in lines[2:] if not ln.startswith("#")]
        assert rows and all(ln.split()[0] in ("PASS", "FAIL", "INFO") for ln in rows)
        assert all("|" in ln for ln in rows)
        n_fail = sum(ln.startswith("FAIL") for ln in rows)
        assert code == (1 if n_fail else 0)
        assert {"gradient.csv", "simulate.csv", "field.csv"} <= set(os.listdir(out))

    def test_example2_verify_fails_with_witness(self, tmp_path):
        out = tmp_path / "out"
        assert run("verify", str(CONFIGS / "example2_degenerate.ini"), str(out)) == 1
        report = (out / "report.txt").read_text()
        geo = [ln for ln in report.splitlines() if "barrier supersolution assumption" in ln][0]
        assert geo.startswith("FAIL") and "witness" in geo

    def test_example1_verify_passes(self, tmp_path):
        assert run("verify", str(CONFIGS / "example1.ini"), str(tmp_path / "out")) == 0

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "hessgame", "solve", "--config", str(tmp_path / "none.ini")],
                             capture_output=True, text=True)
        assert res.returncode == 2
