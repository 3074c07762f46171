import json

import numpy as np

from fedrr.cli import EXIT_CONFIG, EXIT_OK, main
from fedrr.dataset import synthetic_libsvm_like

QUAD_CFG = {
    "dataset": {"quadratic": {"M": 4, "N": 3, "d": 3, "mu": 1.0, "L": 5.0, "client_spread": 1.0, "sample_spread": 0.5, "seed": 2}},
    "M": 4,
    "C": 2,
    "T": 3,
    "algorithms": ["rrcli"],
    "seeds": [0],
    "local_steps": None,
}


def test_run_command(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(QUAD_CFG))
    code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
    assert code == EXIT_OK
    assert (tmp_path / "out" / "runs.csv").exists()
    assert "1 runs completed" in capsys.readouterr().out


def test_run_command_overrides(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(QUAD_CFG))
    code = main([
        "run", "--config", str(cfg_path), "--out", str(tmp_path / "out"),
        "--seeds", "0,1", "--multipliers", "1,2",
    ])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "4 runs completed" in out
    assert "best multipliers" in out


def test_run_command_bad_config(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"algorithms": ["adam"]}))
    code = main(["run", "--config", str(cfg_path)])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_verify_variance_command(capsys):
    code = main(["verify-variance", "--max-size", "4", "--inputs", "2"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "worst relative error" in out
    assert "FAIL" not in out


def test_solve_optimum_command(tmp_path, capsys):
    ds = synthetic_libsvm_like(count=40, dim=6, seed=4, nnz_per_row=3)
    path = tmp_path / "data.txt"
    path.write_text(ds.to_libsvm_text())
    out_npy = tmp_path / "xstar.npy"
    code = main([
        "solve-optimum", "--dataset", str(path), "--alpha", "0.1",
        "--tol", "1e-10", "--out", str(out_npy),
    ])
    assert code == EXIT_OK
    assert "kappa" in capsys.readouterr().out
    x = np.load(out_npy)
    assert x.shape == (6,)


def test_solve_optimum_missing_file(capsys):
    code = main(["solve-optimum", "--dataset", "/nonexistent", "--alpha", "0.1"])
    assert code == EXIT_CONFIG
