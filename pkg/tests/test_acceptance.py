"""Acceptance suite: one test per criterion, summarised at the end of the run."""

import math
import time

import numpy as np
import pytest

from twistguide import cli
from twistguide.criticality import CriticalNumerics, Method, auxiliary_critical_lengths, critical_length
from twistguide.discretize import rectangle_operator
from twistguide.eigensolve import EigenRequest, smallest_eigs
from twistguide.model import Variant, WaveguideSpec, aux_count_band, threshold_energy
from twistguide.perturbation import emergence_study
from twistguide.spectrum import (
    Numerics,
    Parity,
    check_aux_bounds,
    discrete_spectrum,
    truncation_gap,
    validate_bracketing,
)
from twistguide.validation import check_parity

E1 = math.pi**2 / 4
DEFAULT = Numerics()
# [DERIVED] first critical length, indicator zero, ny 16/32/64, hx = hy
ELL1_PINNED = 0.26372356138599873


def timed(f, *a, **k):
    t = time.perf_counter()
    out = f(*a, **k)
    return out, time.perf_counter() - t


@pytest.fixture(scope="session")
def bracketing():
    out = {}
    for ell in (1.0, 2.0, 3.0):
        tw, dt = timed(discrete_spectrum, WaveguideSpec(1.0, ell), DEFAULT)
        r, dt2 = timed(validate_bracketing, ell, DEFAULT, twisted=tw)
        out[ell] = (tw, r, dt + dt2)
    return out


@pytest.fixture(scope="session")
def critical():
    num = CriticalNumerics()
    iz, t1 = timed(critical_length, 1, num, Method.INDICATOR_ZERO)
    guess = (iz.value, max(4 * iz.uncertainty, 1e-3 * iz.value))
    cb, t2 = timed(critical_length, 1, num, Method.COUNT_BISECTION, guess=guess)
    aux, t3 = timed(auxiliary_critical_lengths, 2, num)
    return iz, cb, aux, t1 + t2 + t3


@pytest.fixture(scope="session")
def emergence():
    return timed(emergence_study, 1)


@pytest.mark.criterion(1, "threshold edge of the ell=0 operator within 0.2% on 800x40")
def test_threshold():
    num = Numerics(ny=40, levels=2, L=10.0)
    rep, dt = timed(discrete_spectrum, WaveguideSpec(1.0, 0.0), num)
    # 800 cells of width 0.025 over [-10, 10]; the origin sits mid-cell
    assert rep.levels[0].hx == pytest.approx(0.025) and rep.levels[0].ny == 40
    assert rep.levels[0].nx in (800, 801)
    assert rep.count == 0 and not rep.near_threshold
    errs = [abs(lv.E1h - E1) / E1 for lv in rep.levels]
    assert errs[0] < 2e-3 and errs[1] < errs[0]
    assert abs(rep.spectrum_edge - E1) / E1 < 2e-3
    assert dt < 10.0


@pytest.mark.criterion(2, "rectangle oracles within 0.5% at h = 1/64")
def test_rectangles():
    t = time.perf_counter()
    A = rectangle_operator(1.0, 1.0, 64, 64)
    w = smallest_eigs(A, EigenRequest(k=3)).values
    assert w == pytest.approx(np.array([2, 5, 5]) * math.pi**2, rel=5e-3)
    B = rectangle_operator(1.0, 1.0, 64, 64, ("dirichlet", "dirichlet", "dirichlet", "neumann"))
    w = smallest_eigs(B, EigenRequest(k=2)).values
    assert w == pytest.approx(np.array([1.25, 3.25]) * math.pi**2, rel=5e-3)
    C = rectangle_operator(2.0, 1.0, 128, 64, ("neumann", "dirichlet", "dirichlet", "neumann"))
    w = smallest_eigs(C, EigenRequest(k=1)).values
    assert w[0] == pytest.approx(math.pi**2 / 16 + math.pi**2 / 4, rel=5e-3)
    assert time.perf_counter() - t < 5.0


@pytest.mark.criterion(3, "bracketing by the auxiliary spectrum at 2 ell, ell in {1, 2, 3}")
def test_bracketing(bracketing):
    total = 0.0
    for ell, (tw, r, dt) in bracketing.items():
        assert r.checks and len(r.checks) == tw.count + len(tw.near_threshold)
        assert all(c.passed for c in r.checks), [c for c in r.checks if not c.passed]
        total += dt
    assert total < 120.0


@pytest.mark.criterion(4, "auxiliary eigenvalue bounds and count band")
def test_auxiliary():
    for ell in (0.5, 1.5, 2.5, 3.5):
        rep = discrete_spectrum(WaveguideSpec(1.0, ell, Variant.AUXILIARY), DEFAULT, brackets=False)
        assert all(c.passed for c in check_aux_bounds(rep))
        lo, hi = aux_count_band(ell, 1.0)
        assert lo <= rep.count + len(rep.near_threshold) <= hi


@pytest.mark.criterion(5, "count sandwich against the auxiliary count at 2 ell")
def test_count_sandwich(bracketing):
    for ell, (_, r, _) in bracketing.items():
        assert r.sandwich_passed
        assert r.count_aux // 2 <= r.count_twisted <= r.count_aux // 2 + 1


@pytest.mark.criterion(6, "first three states Even/Odd/Even with score < 1e-6")
def test_parity(bracketing):
    tw = bracketing[3.0][0]
    rec = check_parity(tw)
    assert rec["passed"], rec
    assert [e.parity for e in tw.eigenvalues[:3]] == [Parity.EVEN, Parity.ODD, Parity.EVEN]


@pytest.mark.criterion(7, "critical length: two detectors agree within 1%, inside (0, l*_2/2]")
def test_critical_length(critical):
    iz, cb, aux, dt = critical
    assert abs(iz.value - cb.value) / iz.value < 0.01
    assert 0 < iz.value <= aux[2] / 2 + iz.uncertainty
    assert iz.value == pytest.approx(ELL1_PINNED, rel=1e-9)
    assert dt < 600.0


@pytest.mark.criterion(8, "emergence law: linear onset, mu1 match, cubic two-term error")
def test_emergence(emergence):
    study, dt = emergence
    fin = study.finest()
    assert 0.9 <= fin.slope <= 1.1
    ext = study.extrapolated
    assert abs(ext["mu1_fit"] - ext["mu1_integral"]) / ext["mu1_integral"] <= 0.05
    assert all(6.0 <= r <= 10.0 for r in fin.error_ratios), fin.error_ratios
    assert dt < 900.0


@pytest.mark.criterion(9, "mu1 from the integral, the corner coefficient and the fit agree")
def test_mu1_triple(emergence):
    ext = emergence[0].extrapolated
    vals = [ext["mu1_integral"], ext["mu1_alpha"], ext["mu1_fit"]]
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(vals[i] - vals[j]) / abs(vals[i]) <= 0.05, vals


@pytest.mark.criterion(10, "mu2 formula against the fit within 10%, discrepancy report")
def test_mu2(emergence):
    ext = emergence[0].extrapolated
    assert abs(ext["mu2_formula"] - ext["mu2_fit"]) / abs(ext["mu2_fit"]) <= 0.10
    rep = cli.mu2_discrepancy(ext)
    assert {"mu2_literal", "mu2_cutoff_free", "mu2_fit"} <= set(rep)
    assert all(math.isfinite(v["relative_difference"]) for k, v in rep.items() if k != "reference")


@pytest.mark.criterion(11, "Dirichlet-Neumann end gap decays at 2 sqrt(E1 - Lambda_1)")
def test_truncation_gap():
    g = truncation_gap(WaveguideSpec(1.0, 1.0), [4.0, 4.5, 5.0, 5.5], ny=16)
    assert g.relative_error < 0.2
    assert g.predicted == pytest.approx(2 * math.sqrt(threshold_energy(1, 1.0) - g.lam), rel=5e-3)


@pytest.mark.criterion(12, "validate twice with the same seed is bit-identical")
def test_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ("a.json", "b.json"):
        assert cli.main(["validate", "--quick", "--seed", "3", "--output", name]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
