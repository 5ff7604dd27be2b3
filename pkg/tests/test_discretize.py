import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from twistguide.discretize import (
    DIRICHLET_END,
    NEUMANN_END,
    ConfigurationError,
    EndCondition,
    GeometryError,
    GridSpec,
    OffsetPolicy,
    apply_to_function,
    assemble,
    build_grid,
    dtn_ratio,
    dump_grid,
    dump_matrix,
    end_modes,
    line_operator,
    parity_projectors,
    permutation_matrix,
    rectangle_operator,
    reduce_to_sector,
    sector_basis,
    transparent_end,
)
from twistguide.model import Variant, WaveguideSpec


def small(variant=Variant.TWISTED, ell=1.0, end=None, nx=16, ny=4, L=4.0):
    g = build_grid(WaveguideSpec(1.0, ell, variant), GridSpec(L, nx, ny))
    return assemble(g, transparent_end(0.0) if end is None else end)


# --- grid geometry --------------------------------------------------------


def test_window_edge_sits_mid_cell():
    g = build_grid(WaveguideSpec(1.0, 1.0), GridSpec(4.0, 16, 4))
    assert g.hx == 0.5 and g.window_cells == 4
    assert g.x[0] == -4.25 and g.x[-1] == 4.25
    assert not np.any(np.isclose(np.abs(g.x), 1.0))


def test_node_policy_puts_nodes_on_window_edge():
    g = build_grid(WaveguideSpec(1.0, 1.0), GridSpec(4.0, 16, 4, OffsetPolicy.NODE))
    assert np.any(np.isclose(g.x, 1.0)) and np.any(np.isclose(g.x, -1.0))


def test_boundary_tags_twisted():
    g = build_grid(WaveguideSpec(1.0, 1.0), GridSpec(4.0, 16, 4))
    assert g.dirichlet[:, 0].tolist() == [False] * 11 + [True] * 7
    assert g.dirichlet[:, -1].tolist() == [True] * 7 + [False] * 11
    assert not g.dirichlet[:, 1:-1].any()


def test_boundary_tags_auxiliary():
    g = build_grid(WaveguideSpec(1.0, 1.0, Variant.AUXILIARY), GridSpec(4.0, 16, 4))
    assert g.dirichlet[:, 0].tolist() == [True] * 7 + [False] * 4 + [True] * 7
    assert not g.dirichlet[:, 1:].any()


def test_window_cells_gives_dilation_family():
    a = build_grid(WaveguideSpec(1.0, 0.5), GridSpec(4.0, 16, 4, window_cells=6))
    b = build_grid(WaveguideSpec(1.0, 1.0), GridSpec(4.0, 16, 4, window_cells=6))
    assert a.hx == pytest.approx(1 / 6) and b.hx == pytest.approx(1 / 3)
    assert a.dirichlet[a.twice_pos == 7].all() == b.dirichlet[b.twice_pos == 7].all()


@pytest.mark.parametrize("make, err", [
    (lambda: GridSpec(4.0, 15, 4), ConfigurationError),
    (lambda: GridSpec(4.0, 2, 4), ConfigurationError),
    (lambda: GridSpec(0.0, 16, 4), ConfigurationError),
    (lambda: EndCondition("transparent"), ConfigurationError),
    (lambda: transparent_end(-1.0), ConfigurationError),
    (lambda: build_grid(WaveguideSpec(1.0, 5.0), GridSpec(4.0, 16, 4)), GeometryError),
    (lambda: build_grid(WaveguideSpec(1.0, 0.0), GridSpec(4.0, 16, 4, window_cells=3)),
     ConfigurationError),
    (lambda: line_operator(8, 0.1, "transparent"), ConfigurationError),
])
def test_configuration_errors(make, err):
    with pytest.raises(err):
        make()


# --- operator -------------------------------------------------------------


@pytest.mark.parametrize("end", [None, NEUMANN_END, DIRICHLET_END])
@pytest.mark.parametrize("variant", list(Variant))
def test_operator_symmetric_and_parity_invariant(variant, end):
    b = small(variant, end=end)
    assert abs(b.A - b.A.T).max() == 0.0
    P = permutation_matrix(b)
    assert abs(P @ b.A @ P.T - b.A).max() == 0.0


def test_interior_stencil_values():
    b = small(end=NEUMANN_END)
    g = b.grid
    i, j = g.ncol // 2, 2
    k = b.index[i, j]
    row = b.A.getrow(k).toarray().ravel()
    hx2, hy2 = g.hx**2, g.hy**2
    assert row[k] == pytest.approx(2 / hx2 + 2 / hy2, rel=1e-14)
    assert row[b.index[i + 1, j]] == pytest.approx(-1 / hx2, rel=1e-14)
    assert row[b.index[i, j + 1]] == pytest.approx(-1 / hy2, rel=1e-14)
    assert np.count_nonzero(row) == 5


def test_end_mode_energy_is_discrete_threshold():
    b = small()
    hy = b.grid.hy
    assert b.E1h == pytest.approx(4 / hy**2 * math.sin(math.pi * hy / 4) ** 2, rel=1e-13)
    em = end_modes(b.grid, b.grid.ncol - 1)
    assert np.allclose(em.Q.T @ em.Q, np.eye(em.E.size), atol=1e-12)
    w = np.full(em.rows.size, hy)
    w[em.rows == b.grid.nrow - 1] *= 0.5
    assert np.allclose((em.chi * w[:, None]).T @ em.chi, np.eye(em.E.size), atol=1e-12)


def test_projectors_and_sectors():
    b = small()
    e, o = parity_projectors(b)
    assert abs(e @ e - e).max() < 1e-15 and abs(e @ o).max() < 1e-15
    assert abs(e + o - sp.identity(b.n)).max() < 1e-15
    P = permutation_matrix(b)
    Ue, Uo = sector_basis(b, 1), sector_basis(b, -1)
    assert Ue.shape[1] + Uo.shape[1] == b.n
    assert abs(Ue.T @ Ue - sp.identity(Ue.shape[1])).max() < 1e-15
    assert abs(P @ Ue - Ue).max() < 1e-15 and abs(P @ Uo + Uo).max() < 1e-15
    w = np.linalg.eigvalsh(b.A.toarray())
    ws = np.sort(np.concatenate([np.linalg.eigvalsh(reduce_to_sector(b.A, U).toarray())
                                 for U in (Ue, Uo)]))
    assert np.allclose(w, ws, atol=1e-10)


def test_dtn_derivative_matches_difference():
    b = small()
    h = 1e-6
    fd = (b.with_mu(0.3 + h).A - b.with_mu(0.3 - h).A) / (2 * h)
    assert abs(fd - b.dtn_matrix(0.3, derivative=True)).max() < 1e-7


def test_with_mu_requires_transparent():
    with pytest.raises(ConfigurationError):
        small(end=NEUMANN_END).with_mu(0.1)


@settings(max_examples=50)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 50.0))
def test_dtn_ratio_solves_characteristic_equation(hx, kappa):
    rho, drho = dtn_ratio(hx, kappa)
    assert 0 < rho <= 1
    assert rho + 1 / rho == pytest.approx(2 + (hx * kappa) ** 2, rel=1e-12)
    d = 1e-6 * max(1.0, kappa)
    fd = (dtn_ratio(hx, kappa + d)[0] - dtn_ratio(hx, max(kappa - d, 0.0))[0]) / (
        kappa + d - max(kappa - d, 0.0))
    assert drho == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_interior_consistency_is_second_order():
    def f(x, y):
        return np.exp(-x * x) * np.sin(1.3 * y)

    def lap(x, y):
        return -(4 * x * x - 2 - 1.69) * np.exp(-x * x) * np.sin(1.3 * y)

    errs = []
    for n in (2, 4, 8):
        b = small(end=NEUMANN_END, nx=16 * n, ny=8 * n)
        out = apply_to_function(b, f)
        g = b.grid
        X, Y = np.meshgrid(g.x, g.y, indexing="ij")
        sel = np.zeros_like(out, dtype=bool)
        sel[1:-1, 2:-2] = True
        errs.append(np.nanmax(np.abs(out - lap(X, Y))[sel]))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2) < 0.2)


# --- 1-D and rectangle oracles --------------------------------------------


@pytest.mark.parametrize("lo, hi, shift", [
    ("dirichlet", "dirichlet", 1.0),
    ("neumann", "neumann", 0.0),
    ("dirichlet", "neumann", 0.5),
])
def test_line_operator_matches_discrete_sines(lo, hi, shift):
    n, h = 20, 0.05
    w = np.linalg.eigvalsh(line_operator(n, h, lo, hi).toarray())
    k = np.arange(w.size) + shift
    exact = 4 / h**2 * np.sin(k * math.pi * h / 2) ** 2
    assert np.allclose(w, exact, rtol=1e-12, atol=1e-10)


def test_rectangle_operator_is_separable():
    A = rectangle_operator(1.0, 2.0, 8, 10, ("dirichlet", "neumann", "dirichlet", "dirichlet"))
    wx = np.linalg.eigvalsh(line_operator(8, 1 / 8, "dirichlet", "neumann").toarray())
    wy = np.linalg.eigvalsh(line_operator(10, 0.2).toarray())
    assert np.allclose(np.linalg.eigvalsh(A.toarray()), np.sort(np.add.outer(wx, wy).ravel()),
                       atol=1e-10)


# --- dumps ----------------------------------------------------------------


def test_dump_formats(tmp_path):
    b = small(nx=8, ny=4)
    dump_matrix(b.A, tmp_path / "m.txt")
    dump_grid(b, tmp_path / "g.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    _, _, n, m, nnz = lines[0].split()
    assert (int(n), int(m), int(nnz)) == (b.n, b.n, b.A.nnz) and len(lines) == b.A.nnz + 1
    r, c, v = np.loadtxt(tmp_path / "m.txt", comments="#", unpack=True)
    back = sp.coo_matrix((v, (r.astype(int), c.astype(int))), shape=b.A.shape)
    assert abs(back - b.A).max() == 0.0
    tags = [ln.split()[-1] for ln in (tmp_path / "g.txt").read_text().splitlines()[1:]]
    assert len(tags) == b.n and set(tags) == {"end", "neumann", "interior"}
