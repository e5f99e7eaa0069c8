import csv
import io

import numpy as np
import pytest

from polythm import cli
from polythm.config import ExperimentConfig, parse_config
from polythm.harness import (
    CSV_HEADER,
    SweepPoint,
    amplitudes,
    exit_code,
    expected_failure,
    format_csv,
    iteration_matrix,
    order_rows,
    physical_parameters,
    run_convergence,
    run_point,
    run_robustness,
    run_superconvergence,
    sweep_points,
)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_single_run_emits_one_row():
    cfg = ExperimentConfig(kind="convergence-h", N=(100,), ell=(2,), variants=("vol",), cf=0.0)
    rows, text = run_convergence(cfg)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    data = _rows(text)
    assert len(data) == 1 and data[0]["status"] == "converged" and data[0]["iters"] == "2"
    assert exit_code(rows) == 0


def test_header_emitted_for_empty_table():
    assert format_csv([]).splitlines() == [",".join(CSV_HEADER)]


def test_order_rows_and_sorting():
    cfg = ExperimentConfig(kind="convergence-h", N=(100, 25), ell=(1,), variants=("vol", "plain"), cf=0.0)
    rows, text = run_convergence(cfg)
    data = _rows(text)
    runs = [r for r in data if r["status"] != "order"]
    assert [(r["N"], r["variant"]) for r in runs] == [("25", "plain"), ("25", "vol"), ("100", "plain"), ("100", "vol")]
    orders = [r for r in data if r["status"] == "order"]
    assert {r["kind"] for r in orders} == {"convergence-h/order"} and {r["N"] for r in orders} == {"25-100"}
    for r in orders:
        assert 1.5 < float(r["err_u_L2"]) < 3.0  # L2 order near ell + 1


def test_run_errors_are_recorded_in_row():
    cfg = ExperimentConfig(kind="convergence-h", N=(20,), ell=(2,), variants=("vol",), lloyd_iterations=5, abc=-1.0)
    row = run_point(cfg, SweepPoint("convergence-h", "vol", 2, 20))
    assert row["status"] == "error" and np.isnan(row["err_u_L2"])
    assert exit_code([row]) == 1


def test_kind_parameters():
    cfg = ExperimentConfig(kind="robustness-theta", N=(10,), ell=(1,), theta=(1.0, 1e-4))
    assert physical_parameters(cfg, 1e-4) == {"a0": 0.0, "b0": 0.0, "c0": 0.0, "K": 1.0, "Theta": 1e-4}
    cfg = ExperimentConfig(kind="robustness-thetakappa", N=(10,), ell=(1,))
    assert physical_parameters(cfg, None)["K"] == 1e-10
    cfg = ExperimentConfig(kind="superconvergence", N=(10,), ell=(1,), nu_u=0.1, nu_pT=(1.0, 1e4), cf=0.0)
    assert amplitudes(cfg, 1e4) == (0.1, 1e4, 1e4)
    assert physical_parameters(cfg, 1e4) == {"cf": 0.0}


def test_expected_failures():
    assert expected_failure(SweepPoint("robustness-theta", "old", 3, 310, 1e-2))
    assert not expected_failure(SweepPoint("robustness-theta", "old", 3, 310, 1.0))
    assert not expected_failure(SweepPoint("robustness-theta", "stab", 3, 310, 1e-2))
    assert expected_failure(SweepPoint("robustness-kappa", "old", 2, 310))
    rows = [{"status": "max_iter", "expected_failure": True}, {"status": "converged"}, {"status": "order"}]
    assert exit_code(rows) == 0
    assert exit_code(rows + [{"status": "max_iter", "expected_failure": False}]) == 1


def test_heavy_runs_skipped_by_default():
    cfg = ExperimentConfig(kind="convergence-p", N=(100,), ell=(1, 2, 5, 8))
    assert [p.ell for p in sweep_points(cfg)] == [1, 2]
    assert [p.ell for p in sweep_points(cfg, heavy=True)] == [1, 2, 5, 8]


def test_robustness_matrix_layout():
    cfg = ExperimentConfig(
        kind="robustness-theta", N=(20,), ell=(1,), variants=("vol", "stab"), theta=(1.0, 1e-2), lloyd_iterations=5, max_iter=30
    )
    rows, text, matrix = run_robustness(cfg)
    lines = matrix.splitlines()
    assert lines[0] == "ell=1 N=20"
    assert "theta=1e+00" in lines[1] and "theta=1e-02" in lines[1]
    assert lines[2].startswith("vol") and lines[3].startswith("stab")
    kinds = [r["kind"] for r in _rows(text) if r["status"] != "order"]
    assert kinds == ["robustness-theta/theta=1e+00", "robustness-theta/theta=1e-02"] * 2
    assert [r["variant"] for r in _rows(text)] == ["stab", "stab", "vol", "vol"]


def test_unit_amplitudes_reproduce_convergence_rows():
    base = dict(N=(25,), ell=(1,), variants=("stab",), lloyd_iterations=10)
    _, a = run_convergence(ExperimentConfig(kind="convergence-h", **base))
    _, b = run_superconvergence(ExperimentConfig(kind="superconvergence", **base))
    ra, rb = _rows(a)[0], _rows(b)[0]
    assert rb["kind"] == "superconvergence/nu=1e+00"
    assert {k: v for k, v in ra.items() if k != "kind"} == {k: v for k, v in rb.items() if k != "kind"}


def test_csv_is_byte_reproducible(tmp_path):
    text = "[experiment]\nkind = convergence-h\nN = 25 60\nell = 2\nvariants = stab plain\nlloyd_iterations = 20\n"
    (tmp_path / "c.ini").write_text(text)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}.csv"
        assert cli.main(["run", "--config", str(tmp_path / "c.ini"), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_parallel_sweep_matches_serial():
    base = dict(kind="convergence-h", N=(20, 30), ell=(1,), variants=("vol", "stab"), lloyd_iterations=5)
    _, serial = run_convergence(ExperimentConfig(**base))
    _, par = run_convergence(ExperimentConfig(**base, workers=2))
    assert serial == par


def test_cli_mesh_commands(tmp_path, capsys):
    out = tmp_path / "m.txt"
    assert cli.main(["mesh", "generate", "--cells", "30", "--seed", "2", "--lloyd", "10", "--out", str(out)]) == 0
    assert cli.main(["mesh", "check", str(out)]) == 0
    text = capsys.readouterr().out
    assert "cells=30" in text and "min_simplex_ratio=" in text


def test_cli_run_to_stdout(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nkind = convergence-h\nN = 20\nell = 1\nvariants = vol\ncf = 0\nlloyd_iterations = 5\n")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    data = _rows(capsys.readouterr().out)
    assert len(data) == 1 and data[0]["N"] == "20"


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nkind = nope\nN = 1\nell = 1\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert "unknown experiment kind" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == 2
