import subprocess
import sys

import numpy as np
import pytest
import yaml

from nmqsd.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from nmqsd.io import read_csv


def write_cfg(tmp_path, name="cfg.yaml", **overrides):
    cfg = {
        "model": {"Omega": 1.0, "fock_dim": 8, "initial": {"beta_re": 0.5}},
        "bath": {"kernel": "modes", "modes": {"g": [0.0, 0.0], "omega": [0.8, 1.4]},
                 "oracle_dims": [2, 2]},
        "grid": {"dt": 0.005, "t_max": 2.0},
        "run": {"scheme": "qbm-me", "n_traj": 20, "seed": 3},
        "output": {"directory": str(tmp_path / "out"), "dump": ["observables", "density"]},
    }
    for key, val in overrides.items():
        cfg[key].update(val)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_zero_coupling_master_matches_oracle(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["master", "--config", str(cfg)]) == EXIT_OK
    assert main(["oracle", "--config", str(cfg)]) == EXIT_OK
    out = tmp_path / "out"
    assert main(["compare", str(out / "master_density.csv"), str(out / "oracle_density.csv"),
                 "--out", str(out)]) == EXIT_OK
    _, cols = read_csv(out / "compare.csv")
    assert np.max(cols["trace_distance"]) <= 1e-8


def test_zero_coupling_coefficients_vanish(tmp_path):
    cfg = write_cfg(tmp_path, grid={"dt": 0.02, "t_max": 1.0})
    assert main(["coeffs", "--config", str(cfg)]) == EXIT_OK
    meta, cols = read_csv(tmp_path / "out" / "qbm_me_coeffs.csv")
    for key in ("a", "b", "c_pq", "d_qq"):
        assert not np.any(cols[key])
    assert "config_hash" in meta and meta["seed"] == "3"


def test_reruns_are_bit_identical(tmp_path):
    cfg = write_cfg(tmp_path, run={"scheme": "markov", "markov_rate": 0.2, "chunk": 5},
                    grid={"dt": 0.01, "t_max": 0.5})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["trajectories", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["trajectories", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == EXIT_OK
    for name in ("trajectories_density.csv", "trajectories_observables.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_invalid_configs_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: {dt: 0.1, t_max: 1.0}\nmodel: {Omega: -1}\n")
    assert main(["master", "--config", str(bad)]) == EXIT_INVALID
    bad.write_text("grid: {dt: 0.1, t_max: 1.0}\nunknown_block: 1\n")
    assert main(["master", "--config", str(bad)]) == EXIT_INVALID
    assert main(["master", "--config", str(tmp_path / "missing.yaml")]) == EXIT_INVALID
    cfg = write_cfg(tmp_path, model={"kind": "two-level"})
    assert main(["master", "--config", str(cfg)]) == EXIT_INVALID


def test_numerical_failure_exits_3(tmp_path, capsys):
    # a strongly coupled slow mode drives D(t) through zero
    cfg = write_cfg(tmp_path, bath={"modes": {"g": [0.5], "omega": [0.3]}, "oracle_dims": None},
                    grid={"dt": 0.01, "t_max": 10.0})
    assert main(["master", "--config", str(cfg)]) == EXIT_NUMERICAL
    assert "changes sign" in capsys.readouterr().err


def test_noise_check(tmp_path, capsys):
    cfg = write_cfg(tmp_path, bath={"kernel": "exponential",
                                    "exponential": {"gamma": 0.5, "kappa": 2.0}, "modes": None},
                    run={"n_traj": 2000}, grid={"dt": 0.1, "t_max": 2.0})
    assert main(["noise-check", "--config", str(cfg)]) == EXIT_OK
    _, cols = read_csv(tmp_path / "out" / "noise_check.csv")
    assert np.all(cols["max_cov_error"] < cols["bound"])
    assert "bound" in capsys.readouterr().out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nmqsd.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
