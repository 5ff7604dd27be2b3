"""Emergence of a bound state from the threshold past a critical length.

For ``ell = ell_* + eps`` the emerging eigenvalue is ``E1 - mu(eps)^2`` with
``mu = mu1 eps + mu2 eps^2 + ...``.  This module evaluates ``mu1`` and
``mu2`` from the threshold mode and the first corrector, and fits the same
coefficients to eigenvalues computed directly on the same grid family.

All discrete quantities of one grid level are measured against that level's
discrete threshold ``E1h`` and its discrete critical length.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .criticality import (
    CriticalBracket,
    CriticalNumerics,
    LengthFamily,
    Method,
    ThresholdMode,
    column_traces,
    critical_length,
    sector_of,
    threshold_mode,
)
from .discretize import GridSpec, OffsetPolicy, assemble, build_grid, dtn_ratio, transparent_end
from .spectrum import NumericsError, TransparentProblem, richardson

log = logging.getLogger(__name__)

DEFAULT_EPS_FACTORS = (0.02, 0.04, 0.08, 0.16)

# the cutoff bands have width ell_*/3 (about 0.09 d for n = 1), so the
# emergence family uses cells elongated across the strip: hx = hy / 8
EMERGENCE_NUMERICS = CriticalNumerics(aspect=0.125)


class EmergenceError(RuntimeError):
    """The branch has not emerged at some requested ``eps``."""


class ModeError(RuntimeError):
    """Threshold mode not normalised or not decaying to ``chi_1``."""


# ----------------------------------------------------------------------------
# cutoff


def _smoothstep(t):
    """Quintic ``6t^5 - 15t^4 + 10t^3`` and its first three derivatives."""
    t = np.clip(t, 0.0, 1.0)
    s0 = t**3 * (10 - 15 * t + 6 * t * t)
    s1 = 30 * t * t * (1 - t) ** 2
    s2 = 60 * t * (1 - t) * (1 - 2 * t)
    s3 = 60 * (1 - 6 * t + 6 * t * t)
    inside = (t > 0) & (t < 1)
    return s0, s1 * inside, s2 * inside, s3 * inside


@dataclass(frozen=True)
class CutoffSpec:
    """Odd profile ``xi1`` equal to ``+-1`` for ``|x1 -+ ell| < inner*ell`` and
    zero for ``|x1 -+ ell| > outer*ell``; admissible when
    ``1/3 <= inner < outer <= 2/3``."""

    ell: float
    inner: float = 1.0 / 3.0
    outer: float = 2.0 / 3.0

    def __post_init__(self):
        if not self.ell > 0:
            raise ValueError("cutoff needs ell > 0")
        if not (1.0 / 3.0 - 1e-12 <= self.inner < self.outer <= 2.0 / 3.0 + 1e-12):
            raise ValueError("cutoff bands must satisfy 1/3 <= inner < outer <= 2/3")

    def derivatives(self, x):
        """``(xi, xi', xi'', xi''')`` at ``x``."""
        x = np.asarray(x, dtype=float)
        sgn = np.where(x < 0, -1.0, 1.0)
        s = np.abs(np.abs(x) - self.ell)
        w = (self.outer - self.inner) * self.ell
        t = (s - self.inner * self.ell) / w
        s0, s1, s2, s3 = _smoothstep(t)
        # profile in s: 1 - S(t); ds/d|x| = sign(|x| - ell)
        ds = np.where(np.abs(x) >= self.ell, 1.0, -1.0)
        f0 = 1.0 - s0
        f1 = -s1 / w * ds
        f2 = -s2 / w**2
        f3 = -s3 / w**3 * ds
        # odd extension: xi(x) = sgn f(|x|); derivatives alternate parity
        return sgn * f0, f1, sgn * f2, f3

    def __call__(self, x):
        return self.derivatives(x)[0]


# ----------------------------------------------------------------------------
# discrete differential operators on grid functions


def d1(u: np.ndarray, hx: float) -> np.ndarray:
    out = np.zeros_like(u)
    out[1:-1] = (u[2:] - u[:-2]) / (2 * hx)
    return out


def d2(u: np.ndarray, hx: float) -> np.ndarray:
    out = np.zeros_like(u)
    out[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / (hx * hx)
    return out


def apply_L1(u: np.ndarray, x: np.ndarray, hx: float, cutoff: CutoffSpec) -> np.ndarray:
    """``L1 u = -2 xi' u_11 - xi'' u_1`` with centred differences."""
    _, x1, x2, _ = cutoff.derivatives(x)
    return -2 * x1[:, None] * d2(u, hx) - x2[:, None] * d1(u, hx)


def apply_L2(u: np.ndarray, x: np.ndarray, hx: float, cutoff: CutoffSpec) -> np.ndarray:
    """``L2 u = (xi'^2 - 2 xi'' xi) u_11 - xi''' xi u_1``."""
    x0, x1, x2, x3 = cutoff.derivatives(x)
    return (x1 * x1 - 2 * x2 * x0)[:, None] * d2(u, hx) - (x3 * x0)[:, None] * d1(u, hx)


def trapezoid(u: np.ndarray, grid) -> float:
    """Tensor trapezoid integral of a grid function."""
    wx = np.ones(grid.ncol)
    wx[0] = wx[-1] = 0.5
    wy = np.ones(grid.nrow)
    wy[0] = wy[-1] = 0.5
    return float(grid.hx * grid.hy * (wx @ u @ wy))


def _row_weights(grid) -> np.ndarray:
    wy = np.full(grid.nrow, grid.hy)
    wy[0] = wy[-1] = 0.5 * grid.hy
    return wy


# ----------------------------------------------------------------------------
# mu1


@dataclass
class Mu1Result:
    """``mu1`` from the gradient integral, split into the part inside the
    grid and the exact geometric tails beyond ``+-L``; ``alpha`` route via the
    fitted corner coefficient and ``solvability`` route ``(1/2) int phi L1 phi``.
    """

    integral: float
    interior: float
    tails: float
    alpha: float
    solvability: float | None = None


def x_energy(mode: ThresholdMode) -> tuple[float, float]:
    """Discrete ``int |d phi / dx1|^2`` over the grid and over the exterior.

    Inside the grid this is the edge form of the assembled operator; beyond
    ``+-L`` each transverse mode ``m >= 2`` continues geometrically with the
    ratio ``rho_m`` of the discrete DtN map.
    """
    g = mode.grid
    u = mode.values
    wy = _row_weights(g)
    interior = float(np.sum(((u[1:] - u[:-1]) ** 2) @ wy) / g.hx)
    b = mode.bundle
    rm = b.ends["right"]
    kappa = np.sqrt(np.maximum(rm.E - b.E1h, 0.0))
    rho, _ = dtn_ratio(g.hx, kappa)
    tails = 0.0
    for side in ("right", "left"):
        em = b.ends[side]
        a = column_traces(b, u, em.column)
        tails += float(np.sum(a**2 * (1 - rho) / (g.hx * (1 + rho))))
    return interior, tails


def compute_mu1(mode: ThresholdMode, tol: float = 1e-6) -> Mu1Result:
    """``mu1 = (1/ell_*) int_Pi |d phi/dx1|^2`` on the discrete mode."""
    if not abs(mode.amp_plus - 1.0) <= tol:
        raise ModeError("mode not normalized/critical: mode-1 amplitude at +L is not 1")
    if not mode.decay_rate > 0:
        raise ModeError("mode not normalized/critical: remainder does not decay")
    interior, tails = x_energy(mode)
    total = interior + tails
    if tails > 1e-3 * total:
        raise ModeError("mode not normalized/critical: exterior tail not negligible")
    mu1 = total / mode.ell
    return Mu1Result(mu1, interior / mode.ell, tails / mode.ell, math.pi * mode.alpha1**2 / 4)


# ----------------------------------------------------------------------------
# corrector


@dataclass
class Corrector:
    """First corrector ``psi1`` on the grid truncated at the matching
    cross-sections ``x1 = +-a``.

    ``phi`` is the threshold mode restricted to the same grid.
    ``mismatch`` is the solvability defect ``int phi L1 phi - 2 mu1``
    (discrete) and ``parity_defect`` the relative deviation from
    ``psi1(P x) = wp psi1(x)``.
    """

    values: np.ndarray
    phi: np.ndarray
    bundle: object
    mu1: float
    cutoff: CutoffSpec
    a: float
    mismatch: float
    border: float
    residual: float
    parity_defect: float
    wp: int
    form: str = "weak"
    B1: object = None
    B2: object = None

    @property
    def grid(self):
        return self.bundle.grid


def matching_bundle(mode: ThresholdMode):
    """Bundle of the same grid truncated at the matching column, and the
    column range of the restriction."""
    g = mode.grid
    c1 = mode.match_column
    c0 = g.ncol - 1 - c1
    a = float(g.x[c1])
    gs = GridSpec(a, max(4, 2 * (c1 - c0)), g.ny, OffsetPolicy.MIDCELL, g.window_cells)
    sub = build_grid(g.spec, gs)
    if sub.ncol != c1 - c0 + 1 or not np.allclose(sub.x, g.x[c0:c1 + 1], rtol=0, atol=1e-12):
        raise NumericsError("matching grid does not coincide with the mode grid")
    return assemble(sub, transparent_end(0.0, mode.bundle.end.n_modes)), c0, c1


def _mode1_functional(bundle, side: str) -> np.ndarray:
    em = bundle.ends[side]
    c = np.zeros(bundle.n)
    c[bundle.index[em.column, em.rows]] = em.Q[:, 0] / math.sqrt(bundle.grid.hx)
    return c


def edge_form(bundle, wx_edge: np.ndarray, wy_node: np.ndarray, w_node: np.ndarray) -> sp.csr_matrix:
    """Symmetrised matrix of the discrete quadratic form

    ``sum_x-edges wx_edge (du)(dw) hy wy / hx + sum_y-edges wy_node (du)(dw) hx wx / hy
    + sum_nodes w_node u w W``

    where ``wx_edge[i]`` weights the edges between columns ``i`` and ``i+1``
    and ``wy_node[i]``, ``w_node[i]`` are per column.  Eliminated (Dirichlet)
    endpoints contribute their edge to the diagonal only.  With unit weights
    this reproduces the stencil part of the assembled operator away from the
    end columns.
    """
    g = bundle.grid
    idx = bundle.index
    wy = np.ones(g.nrow)
    wy[0] = wy[-1] = 0.5
    wx = bundle.wx
    rows, cols, vals = [], [], []

    def add(a, b, c):
        keep = c != 0
        a, b, c = a[keep], b[keep], c[keep]
        for p_, q_ in ((a, a), (b, b)):
            ok = p_ >= 0
            rows.append(p_[ok]), cols.append(q_[ok]), vals.append(c[ok])
        ok = (a >= 0) & (b >= 0)
        rows.extend([a[ok], b[ok]]), cols.extend([b[ok], a[ok]]), vals.extend([-c[ok], -c[ok]])

    I, J = np.meshgrid(np.arange(g.ncol - 1), np.arange(g.nrow), indexing="ij")
    add(idx[I, J].ravel(), idx[I + 1, J].ravel(),
        (wx_edge[I] * g.hy * wy[J] / g.hx).ravel())
    I, J = np.meshgrid(np.arange(g.ncol), np.arange(g.nrow - 1), indexing="ij")
    add(idx[I, J].ravel(), idx[I, J + 1].ravel(),
        (wy_node[I] * g.hx * wx[I] / g.hy).ravel())
    n = bundle.n
    cols_of = bundle.node_ij[:, 0]
    rows.append(np.arange(n)), cols.append(np.arange(n)), vals.append(w_node[cols_of] * bundle.weights)
    Bu = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n, n)).tocsr()
    s = sp.diags(1.0 / np.sqrt(bundle.weights))
    return (s @ Bu @ s).tocsr()


def perturbation_forms(bundle, cutoff: CutoffSpec):
    """Matrices of the first- and second-order parts of the mapped form.

    Under ``x1 = y1 + eps xi1(y1)`` the form ``int |grad u|^2 - lambda u^2``
    becomes ``K0 + eps K1 + eps^2 K2`` with mass ``1 + eps xi1'``; returns
    ``(B1, B2)`` for ``K1 - E1 xi1'`` and ``K2`` where
    ``K1(u,w) = int xi1' (-u_1 w_1 + u_2 w_2)`` and
    ``K2(u,w) = int xi1'^2 u_1 w_1``.
    """
    g = bundle.grid
    xm = 0.5 * (g.x[1:] + g.x[:-1])
    dxm = cutoff.derivatives(xm)[1]
    dxn = cutoff.derivatives(g.x)[1]
    B1 = edge_form(bundle, -dxm, dxn, -bundle.E1h * dxn)
    B2 = edge_form(bundle, dxm**2, np.zeros(g.ncol), np.zeros(g.ncol))
    return B1, B2


def _source(bundle, phi: np.ndarray, cutoff: CutoffSpec, form: str, B1=None) -> np.ndarray:
    """``L1 phi`` in symmetrised coordinates (weak or centred strong form)."""
    if form == "weak":
        return -(B1 @ bundle.from_grid(phi))
    if form == "strong":
        g = bundle.grid
        return bundle.from_grid(apply_L1(phi, g.x, g.hx, cutoff))
    raise ValueError(f"unknown form {form!r}")


def solve_corrector(mode: ThresholdMode, mu1: float, cutoff: CutoffSpec | None = None,
                    form: str = "weak") -> Corrector:
    """Solve ``-(Delta + E1) psi1 = L1 phi`` on ``|x1| < a``.

    Mode 1 carries the flux ``-+ mu1 <phi, chi_1>`` at ``+-a``, modes
    ``m >= 2`` the homogeneous discrete DtN closure, and the normalisation
    ``<psi1, chi_1>(a) + wp <psi1, chi_1>(-a) = 0`` fixes the kernel
    direction through a bordered system.

    ``form="weak"`` discretises the source through the mapped quadratic form
    (first differences only); ``form="strong"`` applies centred differences
    to ``L1`` directly.
    """
    cutoff = cutoff or CutoffSpec(mode.ell)
    bundle, c0, c1 = matching_bundle(mode)
    g = bundle.grid
    phi = mode.values[c0:c1 + 1]
    phi_v = bundle.from_grid(phi)
    K = (bundle.A - bundle.E1h * sp.identity(bundle.n, format="csr")).tocsr()
    defect = np.linalg.norm(K @ phi_v) / np.linalg.norm(phi_v)
    if defect > 1e-6 * bundle.E1h:
        raise NumericsError(f"restricted threshold mode is not a kernel vector ({defect:.2e})")
    B1, B2 = perturbation_forms(bundle, cutoff)
    f_v = _source(bundle, phi, cutoff, form, B1)
    # mode-1 flux: ghost = u + hx * slope, slope -mu1 * trace (outward)
    cr = _mode1_functional(bundle, "right")
    cl = _mode1_functional(bundle, "left")
    for c in (cr, cl):
        slope = -mu1 * float(c @ phi_v)
        f_v = f_v + slope * c
    mismatch = float(phi_v @ f_v)
    z = cr + mode.wp * cl
    M = sp.bmat([[K, sp.csr_matrix(phi_v[:, None])], [sp.csr_matrix(z[None, :]), None]]).tocsc()
    try:
        sol = spla.splu(M).solve(np.concatenate([f_v, [0.0]]))
    except RuntimeError as exc:
        raise NumericsError("corrector system singular: ell drifted off criticality") from exc
    psi_v, t = sol[:-1], sol[-1]
    psi = bundle.to_grid(psi_v)
    res = K @ psi_v + t * phi_v - f_v
    residual = float(np.linalg.norm(res) / max(np.linalg.norm(f_v), 1e-300))
    flipped = psi[::-1, ::-1]
    pd = float(np.max(np.abs(flipped - mode.wp * psi)) / np.max(np.abs(psi)))
    return Corrector(psi, phi, bundle, mu1, cutoff, float(g.x[-1]), mismatch, float(t),
                     residual, pd, mode.wp, form, B1, B2)


def solvability_mu1(mode: ThresholdMode, cutoff: CutoffSpec | None = None,
                    form: str = "weak") -> float:
    """The ``mu1`` for which the discrete corrector problem is solvable:
    ``(1/2) int phi L1 phi`` over the matching grid (unit mode-1 traces)."""
    cutoff = cutoff or CutoffSpec(mode.ell)
    bundle, c0, c1 = matching_bundle(mode)
    phi = mode.values[c0:c1 + 1]
    phi_v = bundle.from_grid(phi)
    B1 = perturbation_forms(bundle, cutoff)[0] if form == "weak" else None
    f_v = _source(bundle, phi, cutoff, form, B1)
    traces = [float(_mode1_functional(bundle, s) @ phi_v) for s in ("right", "left")]
    return float(phi_v @ f_v) / (traces[0] ** 2 + traces[1] ** 2)


# ----------------------------------------------------------------------------
# mu2


@dataclass
class Mu2Result:
    """``mu2`` from the corrector.

    ``value`` uses the mode-sum coefficient ``-mu1^2/2`` that follows from the
    general recurrence with ``b2(z) = z^2/2`` and traces at both ends;
    ``literal`` uses ``-mu1^2`` on that sum.  ``cutoff_free`` evaluates the
    cutoff-free representation with every norm squared and
    ``cutoff_free_literal`` with the middle norm unsquared.
    """

    value: float
    literal: float
    norm_term: float
    operator_term: float
    mode_sum: float
    mode_sum_tail: float
    cutoff_free: float
    cutoff_free_literal: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _mode_sum(corr: Corrector):
    b = corr.bundle
    rm = b.ends["right"]
    a = column_traces(b, corr.phi, rm.column)
    dE = rm.E[1:] - b.E1h
    terms = a[1:] ** 2 / np.sqrt(dE)
    total = float(np.sum(terms))
    # the discrete basis is complete; the upper half of the modes only
    # indicates how well the transverse content is resolved
    tail = float(np.sum(terms[terms.size // 2:]))
    return total, tail


def cutoff_free_mu2(mode: ThresholdMode, corr: Corrector, mu1: float) -> tuple[float, float]:
    """Cutoff-free representation of ``mu2`` with the auxiliary solution
    ``psi1 - xi1 d phi/dx1 - mu1 ell phi`` shifted by a multiple of ``phi``
    so that its far field is ``-mu1 x1 chi_1`` without a constant."""
    g = corr.grid
    ell = mode.ell
    phi, psi = corr.phi, corr.values
    xi = corr.cutoff(g.x)
    aux = psi - xi[:, None] * d1(phi, g.hx) - mu1 * ell * phi
    b = corr.bundle
    rm = b.ends["right"]
    t_end = float(column_traces(b, aux, rm.column)[0])
    const = t_end + mu1 * float(g.x[-1])
    aux = aux - const * phi
    wy = _row_weights(g)
    grad = float(np.sum(((phi[1:] - phi[:-1]) * (aux[1:] - aux[:-1])) @ wy) / g.hx)
    chi1 = np.zeros(g.nrow)
    chi1[rm.rows] = rm.chi[:, 0]
    chi1_left = chi1[::-1]
    X = g.x
    inner = trapezoid(np.where(np.abs(X)[:, None] < ell, phi**2, 0.0), g)
    right = trapezoid(np.where(X[:, None] > ell, (phi - chi1[None, :]) ** 2, 0.0), g)
    left = trapezoid(np.where(X[:, None] < -ell, (phi - mode.wp * chi1_left[None, :]) ** 2, 0.0), g)
    squared = -0.5 * mu1**2 * (inner + right + left) + grad / ell
    literal = -0.5 * mu1**2 * (inner + math.sqrt(right) + left) + grad / ell
    return squared, literal


def compute_mu2(mode: ThresholdMode, corr: Corrector, mu1: float) -> Mu2Result:
    """``mu2 = -(mu1^2/2) int_{Pi_a} phi^2 + (1/2) int phi (L1 psi1 + L2 phi)
    - (mu1^2/2) sum_{m>=2} (a_m*)^2 / sqrt(E_m - E1)``."""
    g = corr.grid
    phi, psi = corr.phi, corr.values
    norm = trapezoid(phi**2, g)
    if corr.form == "weak":
        b = corr.bundle
        pv, qv = b.from_grid(phi), b.from_grid(psi)
        op = -0.5 * float(pv @ (corr.B1 @ qv)) - 0.5 * float(pv @ (corr.B2 @ pv))
    else:
        op = 0.5 * trapezoid(phi * (apply_L1(psi, g.x, g.hx, corr.cutoff)
                                    + apply_L2(phi, g.x, g.hx, corr.cutoff)), g)
    msum, tail = _mode_sum(corr)
    warns = []
    if msum > 0 and tail > 0.01 * msum:
        warns.append(f"upper half of the transverse modes carries {tail:.3g}, over 1% of the mode sum")
    value = -0.5 * mu1**2 * norm + op - 0.5 * mu1**2 * msum
    literal = -0.5 * mu1**2 * norm + op - mu1**2 * msum
    cf, cfl = cutoff_free_mu2(mode, corr, mu1)
    return Mu2Result(value, literal, -0.5 * mu1**2 * norm, op, msum, tail, cf, cfl, warns)


# ----------------------------------------------------------------------------
# direct eigenvalues and fit


@dataclass
class EmergenceSeries:
    """Series coefficients and direct eigenvalues on one grid level.

    Two direct families are solved at ``ell_* + eps``: the uniformly dilated
    grid family (``mu_direct``, the physical check of ``mu1_integral``) and
    the fixed grid mapped by the cutoff (``mu_mapped``), whose Taylor
    coefficients are exactly ``mu1_solvability`` and ``mu2_formula``.
    ``error_ratios`` compares the latter with the two-term series in ``mu``.
    """

    n: int
    ell_star: float
    E1h: float
    hx: float
    hy: float
    mu1_integral: float
    mu1_alpha: float
    mu1_solvability: float
    mu2_formula: float
    mu2_formula_integral: float
    mu2_literal: float
    mu2_cutoff_free: float
    mu2_cutoff_free_literal: float
    mu1_fit: float
    mu2_fit: float
    mu2_fit3: float
    mu3_fit: float
    mu1_fit_mapped: float
    mu2_fit_mapped: float
    eps_grid: list
    lambda_direct: list
    mu_direct: list
    mu_mapped: list
    mu_pred: list
    pred_error: list
    error_ratios: list
    error_ratios_dilation: list
    slope: float
    series_residual: float
    mismatch: float
    alpha1: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def csv_rows(self):
        for row in zip(self.eps_grid, self.lambda_direct, self.mu_direct, self.mu_mapped,
                       self.mu_pred):
            yield row


def direct_mu(family: LengthFamily, ell: float, n: int) -> tuple[float, float]:
    """Eigenvalue ``lambda`` of branch ``n`` at ``ell`` and ``mu = sqrt(E1h - lambda)``."""
    sector, j = sector_of(n)
    tp = TransparentProblem(family.bundle(ell), sector)
    try:
        lam, mu, _ = tp.solve_state(j, tol=1e-13, seed=family.seed)
    except NumericsError as exc:
        raise EmergenceError(f"branch not emerged at ell={ell}; ell_* likely wrong") from exc
    if not mu > 0:
        raise EmergenceError(f"branch not emerged at ell={ell}; ell_* likely wrong")
    return lam, mu


def mapped_stencil(bundle, cutoff: CutoffSpec, eps: float) -> sp.csr_matrix:
    """Stencil of the window ``ell_* + eps`` problem on the grid of ``bundle``
    mapped by ``x1 = y1 + eps xi1(y1)``.

    The mapped form has x-edge weights ``1 / (1 + eps xi1')`` and y-edge and
    mass weights ``1 + eps xi1'``; the mass is absorbed by a diagonal
    congruence.  ``xi1'`` vanishes on the end columns, so the transparent
    closure of ``bundle`` applies unchanged.
    """
    g = bundle.grid
    xm = 0.5 * (g.x[1:] + g.x[:-1])
    jm = 1.0 + eps * cutoff.derivatives(xm)[1]
    jn = 1.0 + eps * cutoff.derivatives(g.x)[1]
    if jm.min() <= 0 or jn.min() <= 0:
        raise ValueError("mapping is not monotone for this eps")
    if jn[0] != 1.0 or jn[-1] != 1.0:
        raise ValueError("cutoff must vanish on the end columns")
    P = edge_form(bundle, 1.0 / jm - 1.0, jn - 1.0, np.zeros(g.ncol))
    s = sp.diags(1.0 / np.sqrt(jn[bundle.node_ij[:, 0]]))
    return (s @ (bundle.A_stencil + P) @ s).tocsr()


def direct_mu_mapped(bundle, cutoff: CutoffSpec, eps: float, n: int,
                     seed: int = 0) -> tuple[float, float]:
    """Branch ``n`` at ``ell_* + eps`` on the mapped grid; ``(lambda, mu)``."""
    sector, j = sector_of(n)
    tp = TransparentProblem(bundle, sector, stencil=mapped_stencil(bundle, cutoff, eps))
    try:
        lam, mu, _ = tp.solve_state(j, tol=1e-13, seed=seed)
    except NumericsError as exc:
        raise EmergenceError(f"branch not emerged at eps={eps} on the mapped grid") from exc
    if not mu > 0:
        raise EmergenceError(f"branch not emerged at eps={eps} on the mapped grid")
    return lam, mu


def fit_series(eps, mu, terms: int = 2) -> np.ndarray:
    """Weighted least squares of ``mu = sum_k c_k eps^k`` with weights
    ``eps^-2`` (equivalently an unweighted fit of ``mu / eps``)."""
    e = np.asarray(eps, dtype=float)
    y = np.asarray(mu, dtype=float) / e
    M = np.column_stack([e**k for k in range(terms)])
    coef, *_ = np.linalg.lstsq(M, y, rcond=None)
    return coef


def _ratios(err) -> list:
    return [err[i + 1] / err[i] if err[i] > 0 else float("inf") for i in range(len(err) - 1)]


def emergence_fit(n: int, ell_star: float, family: LengthFamily,
                  eps_factors=DEFAULT_EPS_FACTORS, cutoff: CutoffSpec | None = None,
                  jobs: int = 1) -> EmergenceSeries:
    """Series coefficients from the threshold mode and from direct solves at
    ``ell_star + eps`` on one grid family."""
    eps = [float(f) * ell_star for f in eps_factors]
    if len(eps) < 4 or max(eps) > 0.2 * ell_star * (1 + 1e-12) or min(eps) <= 0:
        raise ValueError("eps grid needs >= 4 points in (0, 0.2 ell_*]")
    if max(eps) / min(eps) < 8 - 1e-9:
        raise ValueError("eps grid must span close to a decade (ratio >= 8)")
    mode = threshold_mode(ell_star, n, family)
    m1 = compute_mu1(mode)
    cutoff = cutoff or CutoffSpec(ell_star)
    m1.solvability = solvability_mu1(mode, cutoff)
    corr = solve_corrector(mode, m1.solvability, cutoff)
    m2 = compute_mu2(mode, corr, m1.solvability)
    m2i = compute_mu2(mode, solve_corrector(mode, m1.integral, cutoff), m1.integral)
    bundle = family.bundle(ell_star)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            pairs = list(ex.map(direct_mu, [family] * len(eps), [ell_star + e for e in eps],
                                [n] * len(eps)))
            mapped = list(ex.map(direct_mu_mapped, [bundle] * len(eps), [cutoff] * len(eps), eps,
                                 [n] * len(eps), [family.seed] * len(eps)))
    else:
        pairs = [direct_mu(family, ell_star + e, n) for e in eps]
        mapped = [direct_mu_mapped(bundle, cutoff, e, n, family.seed) for e in eps]
    lam = [p[0] for p in pairs]
    mu = [p[1] for p in pairs]
    mu_m = [p[1] for p in mapped]
    warns = list(m2.warnings)
    if any(b <= a for a, b in zip(mu, mu[1:])):
        warns.append("mu(eps) is not increasing on the eps grid")
    c2 = fit_series(eps, mu, 2)
    c3 = fit_series(eps, mu, 3)
    cm = fit_series(eps, mu_m, 3)
    e = np.asarray(eps)
    resid = float(np.max(np.abs(np.asarray(mu) / e - (c2[0] + c2[1] * e))))
    slope = math.log(mu[1] / mu[0]) / math.log(eps[1] / eps[0])
    pred = [m1.solvability * x + m2.value * x * x for x in eps]
    err = [abs(a - b) for a, b in zip(mu_m, pred)]
    err_d = [abs(a - (m1.integral * x + m2i.value * x * x)) for a, x in zip(mu, eps)]
    return EmergenceSeries(
        n, ell_star, mode.bundle.E1h, mode.grid.hx, mode.grid.hy, m1.integral, m1.alpha,
        m1.solvability, m2.value, m2i.value, m2.literal, m2.cutoff_free, m2.cutoff_free_literal,
        float(c2[0]), float(c2[1]), float(c3[1]), float(c3[2]), float(cm[0]), float(cm[1]),
        eps, lam, mu, mu_m, pred, err, _ratios(err), _ratios(err_d), slope, resid,
        corr.mismatch, mode.alpha1, warns)


@dataclass
class EmergenceStudy:
    """Per-level series plus Richardson extrapolation of each coefficient."""

    n: int
    bracket: CriticalBracket
    levels: list
    extrapolated: dict
    uncertainty: dict

    def finest(self) -> EmergenceSeries:
        return self.levels[-1]

    def to_dict(self) -> dict:
        return {"n": self.n, "bracket": self.bracket.to_dict(),
                "levels": [s.to_dict() for s in self.levels],
                "extrapolated": self.extrapolated, "uncertainty": self.uncertainty}


COEFFICIENTS = ("ell_star", "mu1_integral", "mu1_alpha", "mu1_solvability", "mu1_fit",
                "mu2_formula", "mu2_formula_integral", "mu2_literal", "mu2_fit", "mu2_fit3",
                "mu2_cutoff_free", "alpha1")


def emergence_study(n: int = 1, numerics: CriticalNumerics = EMERGENCE_NUMERICS,
                    eps_factors=DEFAULT_EPS_FACTORS, bracket: CriticalBracket | None = None,
                    cutoff_bands: tuple = (1.0 / 3.0, 2.0 / 3.0), jobs: int = 1) -> EmergenceStudy:
    """Run :func:`emergence_fit` on every level of the critical-length family."""
    if bracket is None or bracket.method is not Method.INDICATOR_ZERO:
        bracket = critical_length(n, numerics, Method.INDICATOR_ZERO)
    levels = []
    for k, ell in enumerate(bracket.level_values):
        cut = CutoffSpec(ell, *cutoff_bands)
        levels.append(emergence_fit(n, ell, bracket.family(numerics, k), eps_factors, cut, jobs))
    ext, unc = {}, {}
    for name in COEFFICIENTS:
        vals = [abs(getattr(s, name)) if name == "alpha1" else getattr(s, name) for s in levels]
        e, _, tau = richardson(vals)
        ext[name], unc[name] = float(e), float(tau)
    return EmergenceStudy(n, bracket, levels, ext, unc)
