import configparser
import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from crowdpsf import cdl, cli, metric, starfield, tilefile
from crowdpsf.sparse import SolverError


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_ini(path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(path)
    return cp


@pytest.fixture
def fast_ini(tmp_path):
    p = tmp_path / "fast.ini"
    p.write_text("[params]\nn_iter0 = 2\nn_iter = 5\nM = 3\n")
    return p


def test_simulate_narrow_100_has_655_truth_rows(tmp_path):
    assert run("simulate", "--shape", "narrow", "--density", 100, "--size", 256, "--seed", 1,
               "--out", tmp_path) == 0
    with open(tmp_path / "truth.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["x", "y", "flux"] and len(rows) - 1 == 655
    img, meta = tilefile.read_tile(tmp_path / "tile.tile")
    assert img.shape == (256, 256)
    assert meta["shape"] == "narrow" and float(meta["scene.density"]) == 100
    cp = read_ini(tmp_path / "config.ini")
    assert cp["run"]["command"] == "simulate"
    assert cp["scene"]["density"] == "100.0" and cp["scene"]["seed"] == "1"


def test_simulate_zero_stars_no_noise_is_constant(tmp_path):
    assert run("simulate", "--n-stars", 0, "--no-noise", "--size", 32, "--out", tmp_path) == 0
    img, _ = tilefile.read_tile(tmp_path / "tile.tile")
    np.testing.assert_array_equal(img, 1000.0)


def test_same_seed_gives_byte_identical_files(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", "--size", 48, "--density", 25, "--seed", 3, "--out", tmp_path / d) == 0
    for name in ("tile.tile", "truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run("simulate", "--size", 32, "--n-stars", 3) == 0
    assert (tmp_path / "env" / "tile.tile").exists()


def test_simulate_estimate_evaluate_pipeline(tmp_path, fast_ini, capsys):
    assert run("simulate", "--size", 64, "--density", 25, "--seed", 2, "--out", tmp_path / "sim") == 0
    assert run("estimate", tmp_path / "sim" / "tile.tile", "--params", fast_ini,
               "--out", tmp_path / "est") == 0
    psf, meta = tilefile.read_tile(tmp_path / "est" / "psf.tile")
    assert psf.shape == (11, 11) and meta["shape"] == "narrow"
    full = np.loadtxt(tmp_path / "est" / "psf.csv", delimiter=",")
    np.testing.assert_array_equal(full.astype(np.float32), psf)
    assert np.linalg.norm(full) == pytest.approx(1.0, abs=1e-12)
    assert np.all(full >= 0)
    with open(tmp_path / "est" / "trace.csv") as f:
        assert len(list(csv.reader(f))) == 1 + 5
    cp = read_ini(tmp_path / "est" / "config.ini")
    assert cp["params"]["M"] == "3" and cp["params"]["n_iter"] == "5"
    assert cp["params"]["lambda_a"] == "0.01"

    capsys.readouterr()
    assert run("evaluate", tmp_path / "est" / "psf.csv", "--shape", "narrow", "--nr", 10) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("snr_db,")
    assert np.isfinite(float(out[1].split(",")[0]))


def test_estimate_is_reproducible(tmp_path, fast_ini):
    assert run("simulate", "--size", 48, "--density", 25, "--out", tmp_path / "sim") == 0
    for d in ("a", "b"):
        assert run("estimate", tmp_path / "sim" / "tile.tile", "--params", fast_ini,
                   "--out", tmp_path / d) == 0
    assert (tmp_path / "a" / "psf.csv").read_bytes() == (tmp_path / "b" / "psf.csv").read_bytes()


def _write_psf(path, h, shape="narrow"):
    tilefile.write_tile(path, h, {"shape": shape})


def test_evaluate_exact_single_star_crop(tmp_path, capsys):
    ref = starfield.make_reference_psf("narrow")
    h = metric.sample_reference(ref, 11)
    _write_psf(tmp_path / "h.tile", h / np.linalg.norm(h))
    capsys.readouterr()
    assert run("evaluate", tmp_path / "h.tile", "--out", tmp_path / "ev") == 0
    line = capsys.readouterr().out.splitlines()[1].split(",")
    assert float(line[0]) >= 40.0
    assert (tmp_path / "ev" / "metric.csv").exists()


def test_evaluate_init_gaussian_and_flat_kernel(tmp_path, capsys):
    _write_psf(tmp_path / "g.tile", cdl.init_psf(0.5, 11), "wide")
    _write_psf(tmp_path / "f.tile", np.ones((11, 11)))
    vals = []
    for name in ("g.tile", "g.tile", "f.tile"):
        capsys.readouterr()
        assert run("evaluate", tmp_path / name) == 0
        vals.append(float(capsys.readouterr().out.splitlines()[1].split(",")[0]))
    assert vals[0] == vals[1] and np.isfinite(vals[0])
    assert np.isfinite(vals[2]) and vals[2] < 15


def test_export_slices(tmp_path):
    ref = starfield.make_reference_psf("wide")
    h = metric.sample_reference(ref, 15)
    _write_psf(tmp_path / "h.tile", h, "wide")
    assert run("export-slices", tmp_path / "h.tile", "--nr", 10, "--out", tmp_path / "x") == 0
    with open(tmp_path / "x" / "slices.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 15
    for r in rows:
        assert abs(float(r["diff_row"])) <= 1e-6 and abs(float(r["diff_col"])) <= 1e-6
        assert float(r["est_row"]) == pytest.approx(float(r["est_col"]), abs=1e-8)
    with open(tmp_path / "x" / "contours.csv") as f:
        crow = list(csv.DictReader(f))
    assert {r["source"] for r in crow} == {"estimate", "reference"}
    diff, _ = tilefile.read_tile(tmp_path / "x" / "difference.tile")
    assert np.max(np.abs(diff)) <= 1e-6


def test_benchmark_small_grid(tmp_path, fast_ini):
    assert run("benchmark", "--shapes", "narrow", "--densities", "25", "--seeds", "0,1", "--size", 48,
               "--nr", 10, "--params", fast_ini, "--out", tmp_path) == 0
    with open(tmp_path / "benchmark.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 and all(r["status"] == "ok" for r in rows)
    assert json.loads(rows[0]["params"])["M"] == 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary[0]["runs"] == 2 and summary[0]["median_snr_db"] is not None
    assert "median SNR" in (tmp_path / "summary.txt").read_text()
    cp = read_ini(tmp_path / "config.ini")
    assert cp["benchmark"]["seeds"] == "0,1"


def test_benchmark_m_sweep(tmp_path, fast_ini):
    assert run("benchmark", "--shapes", "narrow", "--densities", "25", "--seeds", "0", "--size", 48,
               "--nr", 5, "--m-sweep", "1,2", "--params", fast_ini, "--out", tmp_path) == 0
    with open(tmp_path / "benchmark.csv") as f:
        assert [r["M"] for r in csv.DictReader(f)] == ["1", "2"]


@pytest.mark.parametrize("argv", [
    ["simulate", "--shape", "blob"],
    ["simulate", "--density", "0"],
    ["simulate", "--size", "abc"],
    ["benchmark", "--shapes", "blob"],
])
def test_configuration_errors_exit_2(tmp_path, argv):
    assert run(*argv, "--out", tmp_path) == cli.EXIT_CONFIG


def test_unknown_command_exit_2():
    assert run("nonsense") == cli.EXIT_CONFIG


def test_bad_ini_values_exit_2(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[params]\nlambda_a = -1\n")
    assert run("simulate", "--size", 32, "--n-stars", 1, "--out", tmp_path / "s") == 0
    assert run("estimate", tmp_path / "s" / "tile.tile", "--params", p, "--out", tmp_path) == 2
    p.write_text("[params]\nM = many\n")
    assert run("estimate", tmp_path / "s" / "tile.tile", "--params", p, "--out", tmp_path) == 2


def test_io_errors_exit_4(tmp_path):
    assert run("estimate", tmp_path / "missing.tile", "--shape", "narrow", "--density", 10) == 4
    bad = tmp_path / "bad.tile"
    bad.write_bytes(b"not a tile")
    assert run("evaluate", bad, "--shape", "narrow") == 4


def test_solver_failure_exit_3(tmp_path, monkeypatch, capsys):
    assert run("simulate", "--size", 32, "--n-stars", 4, "--out", tmp_path / "s") == 0

    def boom(*a, **k):
        raise SolverError("objective is not finite")
    monkeypatch.setattr(cdl, "run_cdl", boom)
    assert run("estimate", tmp_path / "s" / "tile.tile", "--out", tmp_path) == 3
    assert "not finite" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "crowdpsf.cli", "simulate", "--size", "32",
                        "--n-stars", "2", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "crowdpsf.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "benchmark" in r.stdout


def test_export_slices_energy_accounting(tmp_path):
    ref = starfield.make_reference_psf("narrow")
    rng = np.random.default_rng(1)
    h = metric.sample_reference(ref, 11, (0.2, 0.0)) + 0.01 * rng.random((11, 11))
    _write_psf(tmp_path / "h.tile", h)
    assert run("export-slices", tmp_path / "h.tile", "--nr", 10, "--out", tmp_path / "x") == 0
    diff, meta = tilefile.read_tile(tmp_path / "x" / "difference.tile")
    h32 = tilefile.read_tile(tmp_path / "h.tile")[0].astype(np.float64)
    snr = float(meta["snr_db"])
    expect = np.sum(h32 ** 2) * 10 ** (-snr / 10)
    assert np.sum(diff.astype(np.float64) ** 2) == pytest.approx(expect, rel=1e-3)
