import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistguide.model import (
    DomainError,
    Side,
    Variant,
    WaveguideSpec,
    aux_count_band,
    aux_eigenvalue_bounds,
    chi,
    decay_rate,
    parity_map,
    threshold_energy,
)

widths = st.floats(0.1, 10.0)
modes = st.integers(1, 30)


# --- oracles --------------------------------------------------------------


def test_threshold_energy_values():
    assert threshold_energy(1, 1.0) == pytest.approx(math.pi**2 / 4, rel=1e-15)
    assert threshold_energy(1, 1.0) == pytest.approx(2.46740110, abs=5e-9)
    assert threshold_energy(2, 1.0) == pytest.approx(22.2066099, abs=5e-8)
    assert threshold_energy(1, 2.0) == pytest.approx(math.pi**2 / 16, rel=1e-15)


def test_chi_values():
    assert chi(1, Side.RIGHT, 0.5, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert chi(1, Side.RIGHT, 0.0, 1.0) == 0.0
    assert abs(chi(1, Side.LEFT, 1.0, 1.0)) < 1e-15
    assert chi(1, "left", 0.0, 1.0) == pytest.approx(math.sqrt(2.0), rel=1e-15)


def test_decay_rate_values():
    assert decay_rate(1, 0.3, 1.0) == 0.3
    assert decay_rate(2, 0.0, 1.0) == pytest.approx(math.pi * math.sqrt(2.0), rel=1e-15)
    assert decay_rate(3, 0.1, 1.0) == pytest.approx(math.sqrt(6 * math.pi**2 + 0.01), rel=1e-15)


def test_aux_bounds_and_band():
    lo, hi = aux_eigenvalue_bounds(1, 3.0)
    assert lo == 0.0 and hi == pytest.approx(math.pi**2 / 36)
    assert aux_count_band(2.5, 1.0) == (2, 3)
    assert aux_count_band(0.5, 1.0) == (0, 1)


@pytest.mark.parametrize("call", [
    lambda: threshold_energy(0, 1.0),
    lambda: threshold_energy(1.5, 1.0),
    lambda: threshold_energy(1, 0.0),
    lambda: threshold_energy(1, -1.0),
    lambda: chi(1, Side.RIGHT, 1.5, 1.0),
    lambda: chi(1, Side.RIGHT, -0.1, 1.0),
    lambda: decay_rate(1, -0.1, 1.0),
    lambda: WaveguideSpec(0.0, 1.0),
    lambda: WaveguideSpec(1.0, -1.0),
    lambda: WaveguideSpec(1.0, float("nan")),
])
def test_domain_errors(call):
    with pytest.raises(DomainError):
        call()


def test_boundary_partition_twisted():
    s = WaveguideSpec(1.0, 1.0, Variant.TWISTED)
    x1 = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
    assert s.is_dirichlet(x1, np.zeros(6)).tolist() == [False] * 5 + [True]
    assert s.is_dirichlet(x1, np.ones(6)).tolist() == [True] + [False] * 5


def test_boundary_partition_auxiliary():
    s = WaveguideSpec(1.0, 1.0, Variant.AUXILIARY)
    x1 = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    assert s.is_dirichlet(x1, np.zeros(5)).tolist() == [True, False, False, False, True]
    assert not s.is_dirichlet(x1, np.ones(5)).any()


# --- properties -----------------------------------------------------------


@given(modes, widths)
def test_energy_gap_identity(m, d):
    gap = threshold_energy(m, d) - threshold_energy(1, d)
    assert gap == pytest.approx(math.pi**2 * (m * m - m) / d**2, rel=1e-12, abs=1e-12)
    assert threshold_energy(m + 1, d) > threshold_energy(m, d)


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(list(Side)), st.floats(0.5, 3.0))
def test_mode_orthonormality(m, n, side, d):
    x = np.linspace(0.0, d, 4001)
    f = chi(m, side, x, d) * chi(n, side, x, d)
    val = float(np.sum(0.5 * (f[1:] + f[:-1])) * (x[1] - x[0]))
    assert val == pytest.approx(1.0 if m == n else 0.0, abs=1e-5)


@given(st.floats(-50, 50), st.floats(0, 5), st.floats(0.1, 5))
def test_parity_map_involution(x1, t, d):
    x2 = min(t, d)
    y1, y2 = parity_map(*parity_map(x1, x2, d), d)
    assert y1 == x1 and y2 == pytest.approx(x2, abs=1e-12)


@given(st.floats(0.0, 5.0), st.floats(-20, 20), st.booleans(), st.floats(0.2, 3.0))
def test_twisted_partition_is_parity_invariant(ell, x1, top, d):
    s = WaveguideSpec(d, ell, Variant.TWISTED)
    x2 = d if top else 0.0
    p1, p2 = parity_map(x1, x2, d)
    assert bool(s.is_dirichlet(x1, x2)) == bool(s.is_dirichlet(p1, p2))


@given(st.integers(2, 10), st.floats(0.0, 4.0), st.floats(0.2, 3.0))
def test_decay_rate_monotone_in_mode(m, mu, d):
    assert decay_rate(m + 1, mu, d) > decay_rate(m, mu, d) >= mu
