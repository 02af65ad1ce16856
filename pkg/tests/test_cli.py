import json

import numpy as np
import pytest

from npmle import io
from npmle.cli import main
from npmle.errors import ConfigError, ParseError


def run(*args):
    return main([str(a) for a in args])


def test_fit_identity_matrix(tmp_path):
    np.savetxt(tmp_path / "I.csv", np.eye(4), delimiter=",")
    assert run("fit", "--matrix", tmp_path / "I.csv", "--out", tmp_path / "o") == 0
    rep = json.loads((tmp_path / "o" / "prior.json").read_text())
    np.testing.assert_allclose(rep["weights"], 0.25, atol=1e-12)
    for key in ("atoms", "weights", "loglik", "eta1", "eta2", "support_size", "outer_iters",
                "ssn_iters", "wall_time_ms", "converged"):
        assert key in rep
    assert rep["schema"] == io.SCHEMA and rep["version"] == io.SCHEMA_VERSION
    assert (tmp_path / "o" / "summary.txt").read_text().startswith("solver")


def test_fit_empty_file(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("")
    assert run("fit", "--data", tmp_path / "e.csv", "--out", tmp_path / "o") == 1
    assert "no data rows" in capsys.readouterr().err


def test_fit_malformed_line(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("# header\n1.0\n2.0\nabc\n")
    assert run("fit", "--data", tmp_path / "d.csv", "--out", tmp_path / "o") == 1
    assert "d.csv:4:" in capsys.readouterr().err


def test_cov_dimension_mismatch(tmp_path, capsys):
    np.savetxt(tmp_path / "d.csv", np.zeros((3, 2)), delimiter=",")
    np.savetxt(tmp_path / "v.csv", np.ones((2, 2)), delimiter=",")
    assert run("fit", "--data", tmp_path / "d.csv", "--cov", f"diag:{tmp_path / 'v.csv'}", "--out", tmp_path) == 1
    assert "shape" in capsys.readouterr().err


def test_zero_diag_rejected_off_data_grid(tmp_path):
    np.savetxt(tmp_path / "d.csv", np.arange(5.0), delimiter=",")
    assert run("fit", "--data", tmp_path / "d.csv", "--grid", "lattice:4", "--zero-diag", "--out", tmp_path) == 1
    assert run("fit", "--data", tmp_path / "d.csv", "--grid", "data,zero-diag", "--out", tmp_path / "z") == 0


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("fit", "--no-such-flag")
    assert exc.value.code == 1


def test_iteration_cap_exit_code(tmp_path):
    assert run("simulate", "--example", "1", "--n", 300, "--tau", 15, "--nu", 4, "--out", tmp_path / "s") == 0
    code = run("fit", "--data", tmp_path / "s" / "data.csv", "--grid", "lattice:100", "--max-iter", 1, "--out", tmp_path / "f")
    assert code == 2
    rep = io.read_report(tmp_path / "f" / "prior.json")
    assert rep["converged"] is False


def test_pipeline(tmp_path):
    s, f, d = tmp_path / "s", tmp_path / "f", tmp_path / "d"
    assert run("simulate", "--example", "1", "--n", 400, "--tau", 20, "--nu", 5, "--seed", 3, "--out", s) == 0
    assert run("fit", "--data", s / "data.csv", "--grid", "lattice:200", "--lowrank:1e-9", "--out", f) == 0
    assert run("denoise", "--data", s / "data.csv", "--prior", f / "prior.json", "--truth", s / "truth.csv",
               "--denoiser", "both", "--out", d) == 0
    for name in ("eb", "ot"):
        text = (d / f"{name}.csv").read_text()
        assert text.startswith(f"# {name}\n")
        assert io.read_csv_matrix(d / f"{name}.csv").shape == (400, 1)
    rep = io.read_report(d / "report.json")
    assert rep["denoise"]["eb"]["total_se"] == pytest.approx(400 * rep["denoise"]["eb"]["mse"])
    assert run("eval", "--prior", f / "prior.json", "--data", s / "data.csv", "--out", tmp_path / "e") == 0
    ev = io.read_report(tmp_path / "e" / "eval.json")
    assert max(ev["eta1"], ev["eta2"]) <= 1e-6


def test_denoise_single_atom_and_symmetry(tmp_path):
    np.savetxt(tmp_path / "y.csv", np.array([[0.0], [0.0], [1.0]]), delimiter=",")
    io.write_report(tmp_path / "p1.json", {"atoms": [[2.5]], "weights": [1.0]})
    assert run("denoise", "--data", tmp_path / "y.csv", "--prior", tmp_path / "p1.json", "--denoiser", "both", "--out", tmp_path / "a") == 0
    for name in ("eb", "ot"):
        np.testing.assert_allclose(io.read_csv_matrix(tmp_path / "a" / f"{name}.csv"), 2.5)
    np.savetxt(tmp_path / "z.csv", np.zeros((2, 1)), delimiter=",")
    io.write_report(tmp_path / "p2.json", {"atoms": [[-1.0], [1.0]], "weights": [0.5, 0.5]})
    assert run("denoise", "--data", tmp_path / "z.csv", "--prior", tmp_path / "p2.json", "--denoiser", "both", "--out", tmp_path / "b") == 0
    np.testing.assert_allclose(io.read_csv_matrix(tmp_path / "b" / "eb.csv"), 0.0, atol=1e-15)
    ot_rows = io.read_csv_matrix(tmp_path / "b" / "ot.csv")
    assert np.all(np.abs(ot_rows) <= 1.0)


def test_denoise_dimension_mismatch(tmp_path):
    np.savetxt(tmp_path / "y.csv", np.zeros((3, 2)), delimiter=",")
    io.write_report(tmp_path / "p.json", {"atoms": [[0.0]], "weights": [1.0]})
    assert run("denoise", "--data", tmp_path / "y.csv", "--prior", tmp_path / "p.json", "--out", tmp_path) == 1


def test_report_keeps_unknown_fields(tmp_path):
    io.write_report(tmp_path / "p.json", {"atoms": [[0.0]], "weights": [1.0], "note": {"keep": [1, 2]}})
    np.savetxt(tmp_path / "y.csv", np.zeros((2, 1)), delimiter=",")
    assert run("denoise", "--data", tmp_path / "y.csv", "--prior", tmp_path / "p.json", "--out", tmp_path / "o") == 0
    assert io.read_report(tmp_path / "o" / "report.json")["note"] == {"keep": [1, 2]}


def test_report_version_check(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"schema": io.SCHEMA, "version": 99}))
    with pytest.raises(ParseError):
        io.read_report(tmp_path / "r.json")


def test_float_round_trip(tmp_path):
    A = np.array([[0.1, 1 / 3], [np.pi, -1e-300]])
    io.write_csv_matrix(tmp_path / "a.csv", A, header="x")
    assert io.read_csv_matrix(tmp_path / "a.csv").tobytes() == A.tobytes()


def test_parse_cov(tmp_path):
    assert io.parse_cov("iso:2.5", 3, 2).value == 2.5
    full = np.tile(np.eye(2).ravel(), (3, 1))
    np.savetxt(tmp_path / "f.csv", full, delimiter=",")
    c = io.parse_cov(f"full:{tmp_path / 'f.csv'}", 3, 2)
    assert c.kind == "full" and c.value.shape == (3, 2, 2)
    with pytest.raises(ConfigError):
        io.parse_cov("banana:1", 3, 2)


def test_simulate_example2_writes_grid(tmp_path):
    assert run("simulate", "--example", "2", "--n", 50, "--m", 20, "--out", tmp_path) == 0
    assert io.read_csv_matrix(tmp_path / "grid.csv").shape == (20, 1)
    code = run("fit", "--data", tmp_path / "data.csv", "--family", "scale", "--grid", f"file:{tmp_path / 'grid.csv'}", "--out", tmp_path / "f")
    assert code == 0


def test_benchmark_single_cell_and_replay(tmp_path):
    spec = {"cells": [{"example": "1", "n": 100, "m": 50, "tau": 5, "nu": 4}], "reps": 1, "seed": 2}
    (tmp_path / "b.json").write_text(json.dumps(spec))
    assert run("benchmark", "--spec", tmp_path / "b.json", "--out", tmp_path / "r1") == 0
    assert run("benchmark", "--spec", tmp_path / "b.json", "--out", tmp_path / "r2") == 0
    a = (tmp_path / "r1" / "benchmark.csv").read_bytes()
    assert a == (tmp_path / "r2" / "benchmark.csv").read_bytes()
    lines = a.decode().splitlines()
    assert len(lines) == 2
    assert lines[0].split(",")[:12] == ["example", "n", "m", "solver", "replication", "loglik", "eta1",
                                        "eta2", "support", "mse", "total_se", "time_ms"]


def test_threads_flag(tmp_path):
    np.savetxt(tmp_path / "I.csv", np.eye(3), delimiter=",")
    assert run("fit", "--matrix", tmp_path / "I.csv", "--threads", 1, "--out", tmp_path) == 0
