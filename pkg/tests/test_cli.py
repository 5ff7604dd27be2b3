import json
import math

import numpy as np
import pytest

from twistguide import cli

FAST = ["--ny", "8", "--levels", "2"]


@pytest.fixture
def run(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "cache"))

    def go(*argv):
        code = cli.main([str(a) for a in argv])
        out = capsys.readouterr()
        return code, out.out, out.err

    return go


def test_spectrum_csv_and_summary(run, tmp_path):
    code, out, err = run("spectrum", "--ell", 2, *FAST)
    assert code == 0
    assert out.startswith("count=2 E1=2.4674011002723395 lowest=[")
    lines = (tmp_path / "spectrum.csv").read_text().splitlines()
    assert lines[0] == ",".join(cli.SPECTRUM_COLUMNS) and len(lines) == 3
    ext = float(lines[1].split(",")[4])
    assert ext == pytest.approx(0.4084178650397132, rel=1e-12)
    assert len(lines[1].split(",")[4].split(".")[1]) >= 15


def test_auxiliary_band_in_summary(run):
    code, out, _ = run("spectrum", "--ell", 2.5, "--variant", "auxiliary", *FAST)
    assert code == 0 and "band=[2,3] ok" in out


def test_cache_hits_and_identical_output(run, tmp_path, caplog):
    caplog.set_level("INFO", logger="twistguide")

    def hits(*extra):
        caplog.clear()
        assert run("sweep", "--ells", "0.5,1.0", *FAST, *extra)[0] == 0
        return [r.getMessage() for r in caplog.records if "cache hits" in r.getMessage()]

    assert hits("--output", "a.csv") == ["cache hits: 0/2"]
    assert hits("--output", "b.csv") == ["cache hits: 2/2"]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert hits("--cache", "false", "--output", "c.csv") == ["cache hits: 0/2"]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()


def test_sweep_monotone_flag(run, tmp_path):
    code, out, _ = run("sweep", "--ell-min", 0, "--ell-max", 1, "--ell-step", 0.5, *FAST,
                       "--format", "json")
    assert code == 0 and "monotone=yes" in out
    payload = json.loads((tmp_path / "sweep.json").read_text())
    assert payload["ells"] == [0.0, 0.5, 1.0] and payload["count_monotone"] is True
    assert payload["counts"] == sorted(payload["counts"])


def test_config_file_and_precedence(run, tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nell = 2.0\nny = 8\nlevels 2\nformat=json\n")
    code, _, _ = run("spectrum", "--config", "c.cfg", "--ell", 1.0)
    assert code == 0
    rep = json.loads((tmp_path / "spectrum.json").read_text())
    assert rep["ell"] == 1.0 and rep["levels"][0]["ny"] == 8


@pytest.mark.parametrize("argv", [
    ("spectrum", "--ell", -1),
    ("spectrum", "--ny", 2),
    ("spectrum", "--bogus", 1),
    ("spectrum", "--eps-factors", "0.1,0.2,0.3,0.4"),
    ("critical", "--nx", 100),
    ("critical", "--method", "newton"),
    ("emerge", "--eps-factors", "0.02,0.04"),
    ("spectrum", "--ell", 1, "--L", 2),
    ("validate", "--quick", "maybe"),
])
def test_bad_input_exit_code(run, argv):
    code, out, err = run(*argv)
    assert code == 2 and out == "" and err.startswith("error:")


def test_unknown_key_in_file(run, tmp_path):
    (tmp_path / "c.cfg").write_text("ell = 1\nfrobnicate = 3\n")
    code, _, err = run("spectrum", "--config", "c.cfg")
    assert code == 2 and "frobnicate" in err


def test_missing_config_file(run):
    code, _, err = run("spectrum", "--config", "missing.cfg")
    assert code == 2


def test_numerical_failure_exit_code(run, monkeypatch):
    def boom(cfg, cache):
        from twistguide.criticality import NoCriticalPointError
        raise NoCriticalPointError("no sign change")

    monkeypatch.setitem(cli.HANDLERS, "critical", boom)
    code, _, err = run("critical")
    assert code == 1 and err.startswith("numerical failure: NoCriticalPointError")


def test_dump_matrix(run, tmp_path):
    code, _, _ = run("spectrum", "--ell", 1, *FAST, "--dump-matrix", "A.txt")
    assert code == 0
    head = (tmp_path / "A.txt").read_text().splitlines()
    n, m, nnz = (int(x) for x in head[0].split()[2:])
    assert n == m and nnz == len(head) - 1
    r, c, v = np.loadtxt(tmp_path / "A.txt", comments="#", unpack=True)
    assert np.array_equal(np.sort(v[r == c])[:1] > 0, [True])
    grid = (tmp_path / "A.txt.grid").read_text().splitlines()
    assert grid[0] == "# index x1 x2 tag" and len(grid) == n + 1


def test_critical_json(run, tmp_path):
    code, out, _ = run("critical", "--ny", 8, "--levels", 2)
    assert code == 0 and out.startswith("ell_1=")
    rep = json.loads((tmp_path / "critical.json").read_text())
    assert rep["results"][0]["value"] == pytest.approx(0.26133118300141445, rel=1e-8)


def test_threshold_mode_csv(run, tmp_path):
    code, _, _ = run("threshold-mode", "--ny", 8, "--levels", 1, "--format", "csv")
    assert code == 0
    lines = (tmp_path / "threshold-mode.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,phi"
    assert max(abs(float(ln.split(",")[2])) for ln in lines[1:]) < 2.0


def test_non_finite_written_as_null():
    text = cli.dumps({"a": math.nan, "b": [1.0, math.inf]})
    assert json.loads(text) == {"a": None, "b": [1.0, None]}
    assert cli.fmt_float(0.1) == "0.10000000000000001"


def test_pinned_regression_fixture(run, tmp_path):
    # [DERIVED] 800 x 40 coarsest grid, two levels
    code, out, _ = run("spectrum", "--d", 1, "--ell", 2, "--L", 10, "--nx", 800, "--ny", 40,
                       "--format", "json")
    assert code == 0 and out.startswith("count=2 ")
    rep = json.loads((tmp_path / "spectrum.json").read_text())
    ev = rep["eigenvalues"]
    assert ev[0]["extrapolated"] == pytest.approx(0.40822898076061209, rel=1e-10)
    assert ev[0]["lower"] == pytest.approx(0.40761812344452242, rel=1e-10)
    assert ev[0]["upper"] == pytest.approx(0.40761812348665555, rel=1e-10)
    assert ev[1]["extrapolated"] == pytest.approx(1.540086210564118, rel=1e-10)
