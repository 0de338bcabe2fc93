import json
import subprocess
import sys

import numpy as np
import pytest

from apcre.cli import main
from apcre.io import read_matrix_csv
from apcre.report import CellData, write_cell_csv
from apcre.design import build_grid
from conftest import TABLE2


def run(*argv):
    return main([str(a) for a in argv])


def payloads(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_design_writes_published_matrix(tmp_path):
    assert run("design", "--a", 3, "--p", 3, "--re", "cohort", "--out", tmp_path) == 0
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "design.csv"), TABLE2)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "design" and "design.csv" in man["outputs"]


@pytest.mark.parametrize("re,deficiency", [("", 1), ("cohort", 2), ("period,cohort", 3)])
def test_design_rank_report(tmp_path, re, deficiency):
    assert run("design", "--a", 6, "--p", 5, "--re", re, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "rank.json").read_text())["deficiency"] == deficiency


@pytest.mark.parametrize("re", ["cohort", "period"])
def test_verify_small_range(tmp_path, re):
    argv = ["verify", "--a-max", 5, "--p-max", 4, "--re", re, "--out", tmp_path]
    assert run(*argv) == 0
    summary = json.loads((tmp_path / "verify.json").read_text())
    assert summary["pass"] and summary["designs"] == 3 * 2 * 7
    header = (tmp_path / "verify.csv").read_text().splitlines()[0]
    assert header == "a,p,lambda,linear,intercept"


def test_verify_rejects_small_grid(capsys):
    with pytest.raises(SystemExit) as exc:
        run("verify", "--a-max", 2)
    assert exc.value.code == 2


def test_verify_failed_check_exit_code(tmp_path):
    assert run("verify", "--a-max", 3, "--p-max", 3, "--lambdas", "1", "--tol", -1, "--out", tmp_path) == 3
    assert (tmp_path / "manifest.json").exists()


def test_simulate_is_reproducible(tmp_path):
    argv = ["simulate", "--reps", 10, "--seed", 7, "--m-grid", "0,0.5,1"]
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    a, b = (tmp_path / "a" / "table5.tsv").read_bytes(), (tmp_path / "b" / "table5.tsv").read_bytes()
    assert a == b
    lines = a.decode().splitlines()
    assert len(lines) == 4 and lines[1].split("\t")[2] == "0" and lines[3].split("\t")[2] == "10"


def test_simulate_endpoint_check(tmp_path):
    assert run("simulate", "--reps", 3, "--m-grid", "0,0.8", "--check-endpoints", "--out", tmp_path) == 0


def test_profile_outputs(tmp_path):
    assert run("profile", "--n-points", 12, "--out", tmp_path) == 0
    rows = (tmp_path / "surface.csv").read_text().splitlines()
    assert len(rows) == 1 + 13 * 13
    maxima = json.loads((tmp_path / "maxima.json").read_text())["local_maxima"]
    assert len(maxima) == 2


def test_fit_and_replay(tmp_path):
    g = build_grid(5, 4)
    data = tmp_path / "cells.csv"
    write_cell_csv(data, CellData(g, np.random.default_rng(0).standard_normal(g.n)))
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert run("fit", "--data", data, "--specs", "c;p,c", "--out", out1) == 0
    header = (out1 / "sensitivity.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["effect", "group", "random_C", "random_P+C"]
    assert run("replay", out1 / "manifest.json", "--out", out2) == 0
    assert payloads(out1) == payloads(out2)


def test_decompose(tmp_path):
    assert run("decompose", "--out", tmp_path) == 0
    d = json.loads((tmp_path / "decomposition.json").read_text())
    assert d["fractions"]["cohort"] == pytest.approx(0.537, abs=0.002)


def test_missing_input_is_io_error(tmp_path):
    assert run("fit", "--data", tmp_path / "nope.csv", "--out", tmp_path) == 4
    assert run("replay", tmp_path / "nope.json", "--out", tmp_path) == 4


def test_bad_data_is_usage_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert run("fit", "--data", bad, "--out", tmp_path) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("APCRE_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("decompose") == 0
    assert (tmp_path / "env" / "decomposition.csv").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "apcre", "decompose", "--out", str(tmp_path)], capture_output=True)
    assert res.returncode == 0
