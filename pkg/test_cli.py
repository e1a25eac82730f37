import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from convex_core import PolyhedralPotential
from file_processor import FileProcessor
from main import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, THREADS_ENV, main, resolve_threads
from measures import DiscreteMeasure
from report_generator import ReportGenerator
from test_data_generator import hyperplane_measure, two_atom_measure


@pytest.fixture
def processor():
    return FileProcessor()


@pytest.fixture
def two_atom_file(tmp_path, processor):
    return processor.save_measure(two_atom_measure(), str(tmp_path / "two_atoms.json"))


@pytest.fixture
def forward_run(tmp_path, processor):
    potential_path = processor.save_potential(PolyhedralPotential([[-1.0], [1.0]], [0.0, 0.0]),
                                              str(tmp_path / "abs.json"))
    out = str(tmp_path / "forward")
    assert main(["forward", "--potential", potential_path, "--out", out]) == EXIT_OK
    return out


def read_json(path):
    with open(path) as f:
        return json.load(f)


# -- solve ---------------------------------------------------------------------------------

def test_solve_two_atoms(tmp_path, two_atom_file):
    out = str(tmp_path / "solve")
    assert main(["solve", "--measure", two_atom_file, "--out", out, "--tol", "1e-11"]) == EXIT_OK
    potential = read_json(os.path.join(out, "potential.json"))
    np.testing.assert_allclose(potential["values"], [-math.log(2), -math.log(2)], atol=1e-8)
    manifest = read_json(os.path.join(out, "manifest.json"))
    assert manifest["exit_code"] == EXIT_OK
    assert manifest["config"]["gradient_tol"] == 1e-11
    assert len(manifest["inputs"]) == 1
    assert os.path.exists(os.path.join(out, "trace.csv"))


def test_solve_in_the_plane_writes_cells(tmp_path, processor):
    path = processor.save_measure(DiscreteMeasure([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], [0.25] * 4),
                                  str(tmp_path / "diamond.csv"))
    out = str(tmp_path / "solve")
    assert main(["solve", "--measure", path, "--out", out]) == EXIT_OK
    cells = pd.read_csv(os.path.join(out, "cells.csv"))
    assert len(cells) == 4
    np.testing.assert_allclose(cells["mass"] / cells["mass"].sum(), 0.25, rtol=1e-9)


def test_solve_rejects_hyperplane_measure(tmp_path, processor):
    path = processor.save_measure(hyperplane_measure(), str(tmp_path / "line.json"))
    out = tmp_path / "solve"
    assert main(["solve", "--measure", path, "--out", str(out)]) == EXIT_INVALID
    assert not (out / "potential.json").exists()


def test_solve_reports_non_convergence(tmp_path, processor):
    measure = processor.save_measure(DiscreteMeasure([[-1.0], [0.0], [1.0]], [0.25, 0.5, 0.25]),
                                     str(tmp_path / "three.json"))
    config = tmp_path / "solver.toml"
    config.write_text("max_iters = 1\ngradient_tol = 1e-12\n")
    out = str(tmp_path / "solve")
    assert main(["solve", "--measure", measure, "--config", str(config), "--out", out]) == EXIT_NOT_CONVERGED
    assert read_json(os.path.join(out, "manifest.json"))["exit_code"] == EXIT_NOT_CONVERGED


def test_solve_rejects_unknown_config_key(tmp_path, two_atom_file):
    config = tmp_path / "solver.toml"
    config.write_text("step_size = 0.1\n")
    assert main(["solve", "--measure", two_atom_file, "--config", str(config),
                 "--out", str(tmp_path / "solve")]) == EXIT_INVALID


# -- validate and forward -------------------------------------------------------------------

def test_validate(tmp_path, processor, two_atom_file):
    assert main(["validate", "--measure", two_atom_file]) == EXIT_OK
    bad = processor.save_measure(hyperplane_measure(), str(tmp_path / "line.csv"))
    assert main(["validate", "--measure", bad]) == EXIT_INVALID


def test_validate_reports_malformed_csv(tmp_path, caplog):
    path = tmp_path / "broken.csv"
    path.write_text("x,w\n1,0.5\n-1,oops\n")
    assert main(["validate", "--measure", str(path)]) == EXIT_INVALID
    assert "Error validating CSV structure" in caplog.text


def test_forward_polyhedral(forward_run, processor):
    measure = processor.load_measure(os.path.join(forward_run, "moment_measure.csv"))
    np.testing.assert_allclose(measure.weights, [0.5, 0.5], rtol=1e-14)
    conditions = read_json(os.path.join(forward_run, "conditions.json"))
    assert conditions["conditions_ok"]
    assert conditions["raw_total"] == pytest.approx(2.0)


def test_forward_gallery_case(tmp_path):
    out = tmp_path / "cube"
    assert main(["forward", "--case", "cube", "--samples", "20000", "--seed", "2", "--out", str(out)]) == EXIT_OK
    cloud = pd.read_csv(out / "moment_measure.csv")
    assert list(cloud.columns) == ["y0", "y1", "weight"]
    assert (cloud[["y0", "y1"]].abs() <= 1.0).all().all()


def test_forward_malformed_potential(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"dim": 1, "atoms": [[1.0], ')
    assert main(["forward", "--potential", str(path), "--out", str(tmp_path / "forward")]) == EXIT_INVALID


# -- checks and reports ----------------------------------------------------------------------

def test_check_writes_ledger(tmp_path):
    out = tmp_path / "check"
    assert main(["check", "prekopa", "--seeds", "2", "--out", str(out)]) == EXIT_OK
    ledger = pd.read_csv(out / "ledger.csv")
    assert len(ledger) == 4
    assert ledger["passed"].all()
    assert read_json(out / "manifest.json")["config"]["seeds"] == [0, 1]


def test_gallery_command(tmp_path):
    out = tmp_path / "gallery"
    assert main(["gallery", "--case", "sphere", "--samples", "50000", "--seed", "1", "--out", str(out)]) == EXIT_OK
    assert pd.read_csv(out / "ledger.csv")["name"].str.startswith("sphere").all()


def test_report_on_missing_directory(tmp_path):
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_INVALID


def test_report_on_forward_run(forward_run):
    assert main(["report", forward_run]) == EXIT_OK
    scatter = pd.read_csv(os.path.join(forward_run, "plot_scatter.csv"))
    assert scatter["kind"].tolist() == ["atom", "atom", "barycenter"]
    assert scatter.loc[2, "y0"] == pytest.approx(0.0, abs=1e-15)
    assert os.path.exists(os.path.join(forward_run, "summary.xlsx"))
    assert os.path.exists(os.path.join(forward_run, "summary.txt"))
    summary = ReportGenerator().generate_summary_statistics(forward_run)
    assert summary["command"] == "forward"
    assert summary["exit_code"] == EXIT_OK


def test_report_on_solve_run(tmp_path, two_atom_file):
    out = str(tmp_path / "solve")
    main(["solve", "--measure", two_atom_file, "--out", out])
    assert main(["report", out]) == EXIT_OK
    trace = pd.read_csv(os.path.join(out, "plot_trace.csv"))
    assert "log10_grad_inf_norm" in trace.columns


# -- threads ------------------------------------------------------------------------------------

def test_resolve_threads(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    assert resolve_threads(None) == 1
    monkeypatch.delenv(THREADS_ENV)
    assert resolve_threads(None) == 1
