"""Critical window lengths and threshold modes.

Two detectors locate the length ``ell_n`` at which the ``n``-th bound state
leaves the threshold:

* ``CountBisection`` bisects ``ell`` on the predicate "at least ``n`` states
  below ``E1 - delta``" for several ``delta`` and extrapolates ``delta -> 0``
  with the square-root law of the emergence;
* ``IndicatorZero`` finds the zero of ``lambda_j(A(0)) - E1h``, where
  ``A(0)`` is the transparent closure at the threshold restricted to the
  parity sector ``(-1)^(n-1)`` and ``j = ceil(n/2)``.

Both run on families of grids that are exact dilations in ``x1`` (the window
always spans the same number of cells), so the discrete eigenvalues are
smooth functions of ``ell``.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as so
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretize import (
    GridSpec,
    OffsetPolicy,
    OperatorBundle,
    assemble,
    build_grid,
    end_modes,
    transparent_end,
)
from .eigensolve import EigenRequest, attainable_tol, count_below, smallest_eigs
from .model import Variant, WaveguideSpec, threshold_energy
from .spectrum import SMALL_DENSE, NumericsError, TransparentProblem, richardson

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    COUNT_BISECTION = "count_bisection"
    INDICATOR_ZERO = "indicator_zero"


class NoCriticalPointError(RuntimeError):
    """The indicator keeps its sign over the search bracket."""


class NotCriticalError(RuntimeError):
    """Threshold mode requested away from a critical length."""


@dataclass(frozen=True)
class CriticalNumerics:
    """Settings for the critical-length searches.

    ``ny`` is the coarsest transverse resolution, ``deltas`` are the energy
    offsets (relative to ``E1``) used by count bisection.
    """

    d: float = 1.0
    variant: Variant = Variant.TWISTED
    ny: int = 16
    levels: int = 3
    aspect: float = 1.0
    L_margin: float = 3.0
    deltas: tuple = (4e-3, 2e-3, 1e-3, 5e-4)
    xtol: float = 1e-9
    n_modes: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.ny < 4 or self.levels < 1:
            raise ValueError("ny must be >= 4 and levels >= 1")
        if self.L_margin < 3.0:
            raise ValueError("L_margin must be >= 3 (L >= ell + 3d)")
        if len(self.deltas) < 4 or any(not 0 < x < 1 for x in self.deltas):
            raise ValueError("need at least 4 deltas in (0, 1)")


class LengthFamily:
    """Grids for varying ``ell`` with a fixed number ``p`` of window cells.

    ``hx = 2 ell / p`` and ``hy = d / ny``; the exterior is closed with the
    exact discrete DtN map, so the truncation length does not change the
    bound states.
    """

    def __init__(self, d: float, variant: Variant, p: int, ny: int, L_margin: float = 3.0,
                 n_modes: int | None = None, seed: int = 0):
        self.d = d
        self.variant = Variant(variant)
        self.p = int(p)
        self.ny = int(ny)
        self.L_margin = L_margin
        self.n_modes = n_modes
        self.seed = seed

    def spec(self, ell: float) -> WaveguideSpec:
        return WaveguideSpec(self.d, ell, self.variant)

    def gridspec(self, ell: float) -> GridSpec:
        L = ell + self.L_margin * self.d
        hx = 2.0 * ell / self.p
        nx = max(4, 2 * int(math.ceil(L / hx)))
        return GridSpec(L, nx, self.ny, OffsetPolicy.MIDCELL, self.p)

    def bundle(self, ell: float) -> OperatorBundle:
        grid = build_grid(self.spec(ell), self.gridspec(ell))
        return assemble(grid, transparent_end(0.0, self.n_modes))

    def problem(self, ell: float, sector: int) -> TransparentProblem:
        return TransparentProblem(self.bundle(ell), sector)

    def refined(self, level: int) -> "LengthFamily":
        f = 2**level
        return LengthFamily(self.d, self.variant, self.p * f, self.ny * f, self.L_margin,
                            self.n_modes, self.seed)


def sector_of(n: int) -> tuple[int, int]:
    """Parity sector and in-sector index of the ``n``-th state."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (1 if n % 2 == 1 else -1), (n + 1) // 2


def family_for(ell_ref: float, numerics: CriticalNumerics) -> LengthFamily:
    hx0 = numerics.aspect * numerics.d / numerics.ny
    p = max(2, int(round(2.0 * ell_ref / hx0)))
    return LengthFamily(numerics.d, numerics.variant, p, numerics.ny, numerics.L_margin,
                        numerics.n_modes, numerics.seed)


def indicator_value(family: LengthFamily, ell: float, n: int) -> float:
    """``lambda_j(A(0)) - E1h`` in the sector of state ``n`` (signed)."""
    sector, j = sector_of(n)
    tp = family.problem(ell, sector)
    A = tp.matrix(0.0)
    r = smallest_eigs(A, EigenRequest(k=j, sigma=0.0, tol=attainable_tol(A, 1e-10),
                                      seed=family.seed, dense_limit=SMALL_DENSE))
    return float(r.values[j - 1] - tp.E1h)


def threshold_indicator(ell: float, n: int = 1, numerics: CriticalNumerics = CriticalNumerics(),
                        level: int = 0) -> float:
    """Signed distance of the ``n``-th sector eigenvalue of the threshold
    closure from ``E1h`` on the grid of ``level`` (dilation family anchored at
    ``ell``).  Positive below the critical length, negative above."""
    return indicator_value(family_for(ell, numerics).refined(level), ell, n)


def count_predicate(family: LengthFamily, ell: float, n: int, delta: float) -> bool:
    """At least ``n`` states below ``E1h - delta`` (``delta`` absolute)."""
    tp = family.problem(ell, 0)
    mu0 = math.sqrt(delta)
    return count_below(tp.matrix(mu0), tp.E1h - delta) >= n


def find_root_bracket(f, lo: float, hi: float, grow: float = 1.25, max_steps: int = 12):
    """Expand ``[lo, hi]`` until ``f(lo) > 0 > f(hi)``; returns values too."""
    flo, fhi = f(lo), f(hi)
    steps = 0
    while not (flo > 0 > fhi):
        if steps >= max_steps:
            raise NoCriticalPointError(f"no sign change of the indicator in [{lo}, {hi}]")
        if flo <= 0:
            lo /= grow
            flo = f(lo)
        if fhi >= 0:
            hi *= grow
            fhi = f(hi)
        steps += 1
    return lo, hi, flo, fhi


@dataclass
class DeltaExtrapolation:
    deltas: list
    ells: list
    ell0: float
    coef_sqrt: float
    coef_lin: float
    exponent: float
    warning: str | None = None


@dataclass
class CriticalBracket:
    n: int
    lo: float
    hi: float
    method: Method
    value: float
    uncertainty: float
    level_values: list
    delta_extrapolation: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    window_cells: int = 0

    def family(self, numerics: CriticalNumerics, level: int = 0) -> LengthFamily:
        """Grid family on which ``level_values[level]`` is the discrete root."""
        return LengthFamily(numerics.d, numerics.variant, self.window_cells, numerics.ny,
                            numerics.L_margin, numerics.n_modes, numerics.seed).refined(level)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "window_cells": self.window_cells, "lo": self.lo, "hi": self.hi, "method": self.method.value,
            "value": self.value, "uncertainty": self.uncertainty,
            "level_values": list(self.level_values),
            "delta_extrapolation": [
                {"deltas": list(e.deltas), "ells": list(e.ells), "ell0": e.ell0,
                 "coef_sqrt": e.coef_sqrt, "coef_lin": e.coef_lin, "exponent": e.exponent,
                 "warning": e.warning} for e in self.delta_extrapolation],
            "warnings": list(self.warnings),
        }


def extrapolate_delta(deltas, ells) -> DeltaExtrapolation:
    """Fit ``ell(delta) = ell0 + c sqrt(delta) + c2 delta`` and, separately,
    the exponent ``beta`` of ``ell(delta) - ell0 ~ delta^beta``."""
    dl = np.asarray(deltas, dtype=float)
    el = np.asarray(ells, dtype=float)
    M = np.column_stack([np.ones_like(dl), np.sqrt(dl), dl])
    coef, *_ = np.linalg.lstsq(M, el, rcond=None)
    ell0, c1, c2 = (float(x) for x in coef)

    def model(x, a, c, b):
        return a + c * x**b

    try:
        popt, _ = so.curve_fit(model, dl, el, p0=(ell0, c1, 0.5), maxfev=20000)
        beta = float(popt[2])
    except (RuntimeError, ValueError):
        beta = float("nan")
    warn = None
    if not abs(beta - 0.5) <= 0.125:
        warn = f"delta-extrapolation exponent {beta:.3g} differs from 1/2 by more than 25%"
    return DeltaExtrapolation(list(map(float, dl)), list(map(float, el)), ell0, c1, c2, beta, warn)


def _bisect(pred, lo: float, hi: float, xtol: float) -> tuple[float, float]:
    if pred(lo) or not pred(hi):
        raise NumericsError("count predicate is not monotone over the bracket (grid too coarse?)")
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return lo, hi


def seed_bracket(n: int, numerics: CriticalNumerics, aux_values: dict | None = None):
    """Search interval for ``ell_n`` from the auxiliary critical lengths.

    Twisted: ``[l*_{2n-1}/2, l*_{2n}/2]``; auxiliary ``k >= 2``:
    ``[(k-1) d, k d]`` from the count band.
    """
    d = numerics.d
    if numerics.variant is Variant.AUXILIARY:
        if n == 1:
            raise ValueError("the first auxiliary critical length is 0")
        return (n - 1) * d, n * d
    aux_values = aux_values or {}
    lo_k, hi_k = 2 * n - 1, 2 * n
    lo = 0.5 * aux_values[lo_k] if lo_k in aux_values else 0.5 * max(lo_k - 1, 0) * d
    hi = 0.5 * aux_values[hi_k] if hi_k in aux_values else 0.5 * hi_k * d
    return lo, hi


def _coarse_root(n: int, numerics: CriticalNumerics, lo: float, hi: float) -> tuple[float, float]:
    """Bracket of the indicator root on the coarse family anchored at ``hi``."""
    fam = family_for(hi, numerics)
    f = lambda e: indicator_value(fam, e, n)  # noqa: E731
    lo = max(lo, 0.1 * hi)
    a, b, fa, fb = find_root_bracket(f, lo, hi)
    r = so.brentq(f, a, b, xtol=1e-4 * (b - a) + 1e-6)
    return r, max(1e-3 * r, 4e-3 * (b - a))


def critical_length(n: int, numerics: CriticalNumerics = CriticalNumerics(),
                    method: Method = Method.INDICATOR_ZERO, aux_values: dict | None = None,
                    guess: tuple | None = None) -> CriticalBracket:
    """Critical length ``ell_n`` Richardson-extrapolated over grid levels.

    ``guess`` optionally gives ``(ell_estimate, half_width)`` and skips the
    coarse search.
    """
    method = Method(method)
    if guess is None:
        lo, hi = seed_bracket(n, numerics, aux_values)
        est, hw = _coarse_root(n, numerics, lo, hi)
    else:
        est, hw = guess
    base = family_for(est, numerics)
    values, extraps, warns = [], [], []
    lo_b = hi_b = est
    for level in range(numerics.levels):
        fam = base.refined(level)
        a, b = est - hw, est + hw
        if method is Method.INDICATOR_ZERO:
            f = lambda e: indicator_value(fam, e, n)  # noqa: E731
            a, b, _, _ = find_root_bracket(f, a, b, grow=1.0 + 4 * hw / est)
            r = so.brentq(f, a, b, xtol=numerics.xtol, rtol=4 * np.finfo(float).eps)
            lo_b, hi_b = r - numerics.xtol, r + numerics.xtol
            values.append(float(r))
        else:
            E1 = WaveguideSpec(numerics.d).E1
            ells = []
            for dr in numerics.deltas:
                delta = dr * E1
                pred = lambda e: count_predicate(fam, e, n, delta)  # noqa: E731
                # the delta-shifted crossing lies above ell_n
                lo_i, hi_i = _bisect(pred, a, b + 4 * math.sqrt(delta) + hw, numerics.xtol)
                ells.append(0.5 * (lo_i + hi_i))
                lo_b, hi_b = lo_i, hi_i
            ex = extrapolate_delta([dr * E1 for dr in numerics.deltas], ells)
            if ex.warning:
                warns.append(f"level {level}: {ex.warning}")
            extraps.append(ex)
            values.append(ex.ell0)
        # narrow the bracket for the next level
        hw = max(4 * abs(values[-1] - est) if level else hw, 20 * numerics.xtol)
        est = values[-1]
    val, _, tau = richardson(values)
    if len(values) == 1:
        tau = abs(hi_b - lo_b)
    return CriticalBracket(n, lo_b, hi_b, method, float(val), float(tau), values, extraps, warns,
                           base.p)


def auxiliary_critical_lengths(kmax: int, numerics: CriticalNumerics) -> dict:
    """``{k: l*_k}`` for ``k = 1..kmax`` (``l*_1 = 0``)."""
    aux = CriticalNumerics(numerics.d, Variant.AUXILIARY, numerics.ny, numerics.levels,
                           numerics.aspect, numerics.L_margin, numerics.deltas, numerics.xtol,
                           numerics.n_modes, numerics.seed)
    out = {1: 0.0}
    for k in range(2, kmax + 1):
        out[k] = critical_length(k, aux, Method.INDICATOR_ZERO).value
    return out


# ----------------------------------------------------------------------------
# threshold mode


@dataclass
class ThresholdMode:
    """Bounded threshold solution ``phi_n`` on a grid of a dilation family.

    ``values`` is the grid function (``ncol x nrow``), normalised to unit
    mode-1 amplitude at ``x1 = +L``.  ``a_star`` holds the mode traces
    ``int phi(a, x2) chi_m(x2) dx2`` at the matching column ``a``, and
    ``a_star_left`` the traces at ``-a`` against the left-branch modes.
    """

    n: int
    ell: float
    values: np.ndarray
    vector: np.ndarray
    bundle: OperatorBundle
    amp_plus: float
    wp: int
    a_star: np.ndarray
    a_star_left: np.ndarray
    match_column: int
    alpha1: float
    alpha3: float
    residual: float
    indicator: float
    decay_rate: float
    decay_predicted: float
    border_defect: float

    @property
    def grid(self):
        return self.bundle.grid

    @property
    def match_x(self) -> float:
        return float(self.grid.x[self.match_column])

    def to_dict(self) -> dict:
        return {"n": self.n, "ell": self.ell, "amp_plus": self.amp_plus, "wp": self.wp,
                "alpha1": self.alpha1, "alpha3": self.alpha3, "residual": self.residual,
                "indicator": self.indicator, "a_star": [float(x) for x in self.a_star],
                "a_star_left": [float(x) for x in self.a_star_left], "match_x": self.match_x,
                "decay_rate": self.decay_rate, "decay_predicted": self.decay_predicted,
                "hx": self.grid.hx, "hy": self.grid.hy, "L": self.grid.L}

    def csv_rows(self):
        g = self.grid
        for i, x in enumerate(g.x):
            for j, y in enumerate(g.y):
                yield (float(x), float(y), float(self.values[i, j]))


def column_traces(bundle: OperatorBundle, u: np.ndarray, column: int) -> np.ndarray:
    """Coefficients of ``u(x_column, .)`` on the discrete transverse modes of
    that column (trapezoid inner products, signs as in ``end_modes``)."""
    em = end_modes(bundle.grid, column)
    w = bundle.grid.hy * np.where((em.rows == 0) | (em.rows == bundle.grid.nrow - 1), 0.5, 1.0)
    return em.chi.T @ (w * u[column, em.rows])


def corner_fit(u: np.ndarray, grid, corner: tuple, rmin: float, rmax: float, flip: bool = False):
    """Least-squares ``(alpha1, alpha3)`` of
    ``alpha1 r^{1/2} sin(t/2) + alpha3 r^{3/2} sin(3t/2)`` on an annulus.

    ``t`` is measured from the Dirichlet side.  ``flip`` uses the point
    reflection (for the corner at ``(-ell, d)``).
    """
    X, Y = np.meshgrid(grid.x, grid.y, indexing="ij")
    dx, dy = X - corner[0], Y - corner[1]
    if flip:
        dx, dy = -dx, -dy
    r = np.hypot(dx, dy)
    t = np.arctan2(dy, dx)
    sel = (r >= rmin) & (r <= rmax) & (t >= 0)
    B = np.column_stack([np.sqrt(r[sel]) * np.sin(t[sel] / 2), r[sel] ** 1.5 * np.sin(1.5 * t[sel])])
    coef, *_ = np.linalg.lstsq(B, u[sel], rcond=None)
    return float(coef[0]), float(coef[1])


def threshold_mode(ell: float, n: int, family: LengthFamily, *, tol: float = 1e-7,
                   fit_window: tuple = (2.0, 10.0)) -> ThresholdMode:
    """Bounded solution at the threshold via a bordered system.

    ``ell`` must be a root of the family's indicator (to ``tol * E1``); the
    border imposes unit mode-1 amplitude at ``x1 = +L``.
    """
    sector, j = sector_of(n)
    bundle = family.bundle(ell)
    grid = bundle.grid
    tp = TransparentProblem(bundle, sector)
    K = (tp.matrix(0.0) - tp.E1h * sp.identity(tp.n, format="csr")).tocsr()
    ind = indicator_value(family, ell, n)
    if abs(ind) > tol * grid.spec.E1:
        raise NotCriticalError(f"ell={ell} not critical: indicator {ind:.3e}")
    # mode-1 amplitude at the right end in symmetrised coordinates
    rm = bundle.ends["right"]
    c = np.zeros(bundle.n)
    idx = bundle.index[rm.column, rm.rows]
    c[idx] = rm.Q[:, 0] / math.sqrt(grid.hx)
    cs = tp.U.T @ c if tp.U is not None else c
    Kb = sp.bmat([[K, sp.csr_matrix(cs[:, None])], [sp.csr_matrix(cs[None, :]), None]]).tocsc()
    rhs = np.zeros(tp.n + 1)
    rhs[-1] = 1.0
    sol = spla.splu(Kb).solve(rhs)
    w, s = sol[:-1], sol[-1]
    v = tp.lift(w)
    u = bundle.to_grid(v)
    amp = float(c @ v)
    # residual against the continuum threshold, interior columns only
    Av = bundle.A @ v - grid.spec.E1 * v
    cols = bundle.node_ij[:, 0]
    interior = (cols > 0) & (cols < grid.ncol - 1)
    residual = float(np.linalg.norm((Av / np.sqrt(bundle.weights))[interior])
                     / np.linalg.norm(u[1:-1]))
    d = grid.spec.d
    a_col = grid.first_column_at_or_beyond(ell + 2 * d)
    a_left = grid.ncol - 1 - a_col
    a_star = column_traces(bundle, u, a_col)
    a_star_left = column_traces(bundle, u, a_left)
    # decay of the remainder between ell + 2d and ell + 3d
    c3 = min(grid.column_of(ell + 3 * d), grid.ncol - 1)
    chi1 = end_modes(grid, a_col).chi[:, 0]
    rows = end_modes(grid, a_col).rows
    wy = grid.hy * np.where((rows == 0) | (rows == grid.nrow - 1), 0.5, 1.0)

    def rem(col):
        return math.sqrt(float(np.sum(wy * (u[col, rows] - chi1) ** 2)))

    rate = math.log(rem(a_col) / rem(c3)) / (grid.x[c3] - grid.x[a_col])
    predicted = math.sqrt(threshold_energy(2, d) - threshold_energy(1, d))
    h = max(grid.hx, grid.hy)
    a1, a3 = corner_fit(u, grid, (ell, 0.0), fit_window[0] * h, fit_window[1] * h)
    return ThresholdMode(n, ell, u, v, bundle, amp, sector, a_star, a_star_left, a_col, a1, a3,
                         residual, ind, rate, predicted, float(s))


def threshold_modes(n: int, numerics: CriticalNumerics = CriticalNumerics(),
                    bracket: CriticalBracket | None = None) -> tuple[CriticalBracket, list]:
    """Indicator roots and threshold modes on every grid level."""
    if bracket is None or bracket.method is not Method.INDICATOR_ZERO:
        bracket = critical_length(n, numerics, Method.INDICATOR_ZERO)
    modes = [threshold_mode(ell, n, bracket.family(numerics, k))
             for k, ell in enumerate(bracket.level_values)]
    return bracket, modes
