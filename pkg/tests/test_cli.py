import json

import numpy as np
import pytest

from sweepopt.cli import (EXIT_CERT, EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_STALLED, ConfigError, RunConfig,
                          load_config, main, read_candidate, write_candidate)
from sweepopt.certificate import certify
from sweepopt.io import read_csv


def run(tmp_path, *args):
    return main([*args, "--set", f"outdir={tmp_path}"])


def test_defaults():
    cfg = RunConfig.from_mapping({})
    assert cfg.N == 2000 and cfg.gamma == 1e4 and cfg.count == 8 and cfg.growth == 3.0
    assert cfg.oracle_ns == (500, 1000, 2000, 4000)


@pytest.mark.parametrize("raw", [
    {"N": "0"}, {"N": "ten"}, {"gamma": "-1"}, {"schedule.growth": "1"}, {"optimizer.mode": "guess"},
    {"backend": "gpu"}, {"oracle.ns": "100"}, {"no_such_key": "1"}, {"instance.eta": "abc"},
])
def test_invalid_config(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(raw)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("N = 300\ngamma = 500  # small\n")
    cfg = load_config(path, ["N=400", "instance.c1_offset=0.5"])
    assert cfg.N == 400 and cfg.gamma == 500.0 and cfg.params == {"c1_offset": 0.5}


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "simulate", "--set", "N=300", "--set", "gamma=2000") == EXIT_OK
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    summary = json.loads((a / "trajectory.summary.json").read_text())
    assert summary["max_psi"] <= 1e-8


def test_simulate_python_backend_agrees(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "simulate", "--set", "N=200", "--set", "gamma=500") == EXIT_OK
    assert run(b, "simulate", "--set", "N=200", "--set", "gamma=500", "--set", "backend=python") == EXIT_OK
    _, da = read_csv(a / "trajectory.csv")
    _, db = read_csv(b / "trajectory.csv")
    np.testing.assert_allclose(da, db, atol=1e-12)


def test_exit_codes(tmp_path):
    assert run(tmp_path, "simulate", "--set", "gamma=5") == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--set", "bogus=1") == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--set", "instance=nowhere") == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--config", str(tmp_path / "missing.cfg")) == EXIT_IO
    assert run(tmp_path, "certify", str(tmp_path / "no_candidate")) == EXIT_IO
    assert run(tmp_path, "certify") == EXIT_CONFIG


def test_certify_analytic(tmp_path, capsys):
    assert run(tmp_path, "certify", "--analytic") == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 9
    doc = json.loads((tmp_path / "certificate.json").read_text())
    assert doc["overall_pass"] is True
    assert run(tmp_path, "certify", "--analytic", "--variant", "u_pi") == EXIT_CERT


def test_sweep_single_stage(tmp_path):
    assert run(tmp_path, "sweep", "--set", "N=400", "--set", "schedule.count=1") == EXIT_OK
    header, data = read_csv(tmp_path / "sweep.csv")
    assert header[0] == "gamma" and data.shape == (1, 7)
    assert data[0, 0] == pytest.approx(4 * 7.271310062904557 / 2.7)


def test_optimize_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    opts = ["--set", "N=200", "--set", "schedule.count=2"]
    for d in (a, b):
        assert run(d, "optimize", *opts) == EXIT_OK
    for name in ("continuation.csv", "candidate/trajectory.csv", "candidate/adjoint.csv", "stages/stage_01.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_optimize_stalls_on_unreachable_target(tmp_path):
    opts = ["--set", "N=200", "--set", "schedule.count=2", "--set", "instance.c1_offset=3"]
    assert run(tmp_path, "optimize", *opts) == EXIT_STALLED


def test_oracle_compare(tmp_path, capsys):
    assert run(tmp_path, "oracle-compare", "--set", "oracle.ns=500,1000") == EXIT_OK
    header, data = read_csv(tmp_path / "oracle.csv")
    assert header == ["N", "h", "sup_dist", "err_catching_up", "err_penalized"]
    assert data.shape == (2, 5)
    assert "slope" in capsys.readouterr().out


def test_candidate_roundtrip(tmp_path, annulus, continuation_2000):
    cand = continuation_2000.candidate
    write_candidate(tmp_path, cand)
    back = read_candidate(annulus, tmp_path)
    np.testing.assert_array_equal(back.x, cand.x)
    np.testing.assert_array_equal(back.p.values, cand.p)
    np.testing.assert_array_equal(back.xi_cells, cand.xi_cells)
    assert certify(annulus, back).passed
    assert main(["certify", str(tmp_path), "--set", f"outdir={tmp_path}"]) == EXIT_OK
