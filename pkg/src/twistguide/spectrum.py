"""Discrete spectrum below the threshold, truncation brackets and sweeps.

Three closures of the truncated strip are solved on each grid:

* Neumann ends give a lower bracket and Dirichlet ends an upper bracket
  (domain monotonicity holds exactly for the discrete forms);
* transparent ends give the bound states of the infinite discrete strip.
  Since the closure depends on the offset ``mu``, the state ``E1h - mu^2`` is
  the root of ``g(mu) = lambda_k(A(mu)) + mu^2 - E1h``, a strictly
  increasing function, and the number of states below ``E1h - mu0^2`` is the
  negative inertia of ``A(mu0) - (E1h - mu0^2)``.

Values from a family of grids ``h, h/2, h/4`` are Richardson-extrapolated.
"""

from __future__ import annotations

import concurrent.futures as cf
import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .discretize import (
    DIRICHLET_END,
    NEUMANN_END,
    EndKind,
    GeometryError,
    GridSpec,
    OffsetPolicy,
    OperatorBundle,
    assemble,
    build_grid,
    reduce_to_sector,
    sector_basis,
    transparent_end,
)
from .eigensolve import EigenRequest, attainable_tol, count_below, eigs_in_interval, smallest_eigs
from .model import Variant, WaveguideSpec, aux_count_band, aux_eigenvalue_bounds

log = logging.getLogger(__name__)

# below this size internal solves go dense
SMALL_DENSE = 400


class Parity(str, enum.Enum):
    EVEN = "even"
    ODD = "odd"
    UNDETERMINED = "undetermined"


class NumericsError(RuntimeError):
    pass


@dataclass(frozen=True)
class Numerics:
    """Discretisation and solver settings shared by the spectral drivers.

    ``ny`` is the transverse cell count of the coarsest level; level ``k``
    uses ``ny * 2**k`` with ``hx ~ aspect * hy``.  ``L`` defaults to
    ``ell + L_margin * d``.
    """

    ny: int = 16
    levels: int = 3
    aspect: float = 1.0
    L: float | None = None
    L_margin: float = 3.0
    tol: float = 1e-9
    margin: float = 1e-3
    n_modes: int | None = None
    offset_policy: OffsetPolicy = OffsetPolicy.MIDCELL
    window_cells: int | None = None
    seed: int = 0
    use_sectors: bool = True

    def __post_init__(self):
        object.__setattr__(self, "offset_policy", OffsetPolicy(self.offset_policy))
        if self.ny < 4:
            raise ValueError("ny must be >= 4")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.aspect > 0:
            raise ValueError("aspect must be > 0")
        if self.L_margin < 0:
            raise ValueError("L_margin must be >= 0")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must be in [0, 1)")

    def truncation(self, spec: WaveguideSpec) -> float:
        return self.L if self.L is not None else spec.ell + self.L_margin * spec.d

    def base_window_cells(self, spec: WaveguideSpec) -> int | None:
        if spec.ell == 0:
            return None
        if self.window_cells is not None:
            return self.window_cells
        hx0 = self.aspect * spec.d / self.ny
        return max(1, int(round(2.0 * spec.ell / hx0)))

    def gridspec(self, spec: WaveguideSpec, level: int = 0) -> GridSpec:
        L = self.truncation(spec)
        if not L > spec.ell:
            raise GeometryError(f"L={L} must exceed ell={spec.ell}")
        ny = self.ny * 2**level
        hx = self.aspect * spec.d / ny
        p0 = self.base_window_cells(spec)
        p = None if p0 is None else p0 * 2**level
        if p is not None:
            hx = 2.0 * spec.ell / p
        nx = max(4, 2 * int(math.ceil(L / hx)))
        return GridSpec(L, nx, ny, self.offset_policy, p)


# ----------------------------------------------------------------------------
# transparent closure in a parity sector


class TransparentProblem:
    """Transparent-end operator ``A(mu)`` restricted to a symmetry sector.

    ``sector`` is +1, -1 or 0 (no reduction).  The reduced stencil part is
    formed once; only the end-column DtN blocks change with ``mu``.
    ``stencil`` replaces ``bundle.A_stencil`` (same sparsity and end
    columns), e.g. for a mapped-grid operator.
    """

    def __init__(self, bundle: OperatorBundle, sector: int = 0, stencil=None):
        if bundle.end.kind is not EndKind.TRANSPARENT:
            raise ValueError("TransparentProblem needs a transparent bundle")
        self.bundle = bundle
        self.sector = sector
        self.E1h = bundle.E1h
        A_st = bundle.A_stencil if stencil is None else stencil
        if sector:
            self.U = sector_basis(bundle, sector)
            self.B_st = reduce_to_sector(A_st, self.U)
        else:
            self.U = None
            self.B_st = A_st

    @property
    def n(self) -> int:
        return self.B_st.shape[0]

    def _reduce(self, M):
        return M if self.U is None else reduce_to_sector(M, self.U)

    def matrix(self, mu: float) -> sp.csr_matrix:
        return (self.B_st + self._reduce(self.bundle.dtn_matrix(mu))).tocsr()

    def derivative(self, mu: float) -> sp.csr_matrix:
        return self._reduce(self.bundle.dtn_matrix(mu, derivative=True))

    def lift(self, v: np.ndarray) -> np.ndarray:
        """Sector coordinates to full symmetrised node vector."""
        return v if self.U is None else self.U @ v

    def count_below_threshold(self) -> int:
        return count_below(self.matrix(0.0), self.E1h)

    def count_below(self, mu0: float) -> int:
        """Number of states below ``E1h - mu0^2``."""
        return count_below(self.matrix(mu0), self.E1h - mu0 * mu0)

    def eig(self, mu: float, k: int, seed: int = 0, tol: float = 1e-10):
        """``k``-th smallest eigenpair of ``A(mu)`` (1-based ``k``)."""
        A = self.matrix(mu)
        r = smallest_eigs(A, EigenRequest(k=k, sigma=0.0, tol=attainable_tol(A, tol), seed=seed,
                                          dense_limit=SMALL_DENSE))
        if r.values.size < k or not r.converged[k - 1]:
            raise NumericsError("eigensolver did not converge in transparent solve")
        return float(r.values[k - 1]), r.vectors[:, k - 1]

    def solve_state(self, k: int, *, tol: float = 1e-12, seed: int = 0, max_iter: int = 60):
        """Bound state number ``k`` of the sector: returns ``(lam, mu, v)``.

        Safeguarded Newton on ``g(mu) = lambda_k(A(mu)) + mu^2 - E1h``.
        """
        lam0, v = self.eig(0.0, k, seed)
        g0 = lam0 - self.E1h
        if g0 >= 0:
            raise NumericsError(f"no bound state {k} in this sector")
        lo, hi = 0.0, math.sqrt(-g0)
        mu = hi
        g_lo = g0
        for _ in range(max_iter):
            lam, v = self.eig(mu, k, seed)
            g = lam + mu * mu - self.E1h
            if abs(g) <= tol * self.E1h:
                break
            if g > 0:
                hi = mu
            else:
                lo, g_lo = mu, g
            dg = float(v @ (self.derivative(mu) @ v)) + 2.0 * mu
            step = mu - g / dg if dg > 0 else -1.0
            if not lo < step < hi:
                step = 0.5 * (lo + hi)
            if abs(step - mu) <= 1e-15 * max(1.0, mu):
                mu = step
                break
            mu = step
        lam, v = self.eig(mu, k, seed)
        return self.E1h - mu * mu, mu, v


# ----------------------------------------------------------------------------
# parity


def classify_parity(vector, bundle: OperatorBundle, threshold: float = 1e-6):
    """Parity of a symmetrised node vector under the grid symmetry.

    Returns ``(Parity, score)`` where ``score`` is the smaller of
    ``|v - Pv| / |v|`` and ``|v + Pv| / |v|``.
    """
    perm = bundle.parity_perm
    if perm is None:
        raise ValueError("grid is not symmetric under the parity map")
    v = np.asarray(vector, dtype=float)
    nv = np.linalg.norm(v)
    pv = v[perm]
    s_even = np.linalg.norm(v - pv) / nv
    s_odd = np.linalg.norm(v + pv) / nv
    if s_even < threshold and s_even <= s_odd:
        return Parity.EVEN, float(s_even)
    if s_odd < threshold:
        return Parity.ODD, float(s_odd)
    return Parity.UNDETERMINED, float(min(s_even, s_odd))


# ----------------------------------------------------------------------------
# per-level solves


@dataclass
class LevelSpectrum:
    level: int
    hx: float
    hy: float
    L: float
    nx: int
    ny: int
    E1h: float
    transparent: list
    parities: list
    scores: list
    lower: list
    upper: list


def solve_level(spec: WaveguideSpec, numerics: Numerics, level: int,
                brackets: bool = True, keep_vectors: bool = False) -> LevelSpectrum:
    gs = numerics.gridspec(spec, level)
    grid = build_grid(spec, gs)
    bundle = assemble(grid, transparent_end(0.0, numerics.n_modes))
    sectors = (1, -1) if (numerics.use_sectors and bundle.parity_perm is not None) else (0,)
    states = []
    for s in sectors:
        tp = TransparentProblem(bundle, s)
        nb = tp.count_below_threshold()
        for k in range(1, nb + 1):
            lam, mu, v = tp.solve_state(k, tol=numerics.tol, seed=numerics.seed)
            full = tp.lift(v)
            states.append((lam, mu, full))
    states.sort(key=lambda t: t[0])
    lams = [t[0] for t in states]
    parities, scores = [], []
    for _, _, v in states:
        if bundle.parity_perm is not None:
            p, sc = classify_parity(v, bundle)
        else:
            p, sc = Parity.UNDETERMINED, float("nan")
        parities.append(p)
        scores.append(sc)
    lower, upper = [], []
    if brackets:
        nb = len(lams)
        bn = assemble(grid, NEUMANN_END)
        rn = eigs_in_interval(bn.A, -1.0, bundle.E1h, tol=1e-8, seed=numerics.seed,
                              dense_limit=SMALL_DENSE)
        lower = [float(x) for x in rn.values[:nb]]
        bd = assemble(grid, DIRICHLET_END)
        rd = eigs_in_interval(bd.A, -1.0, bundle.E1h, tol=1e-8, seed=numerics.seed,
                              dense_limit=SMALL_DENSE)
        upper = [float(x) for x in rd.values[:nb]]
        upper += [bundle.E1h] * (nb - len(upper))
    out = LevelSpectrum(level, grid.hx, grid.hy, grid.L, grid.nx, grid.ny, bundle.E1h, lams,
                        parities, scores, lower, upper)
    if keep_vectors:
        out.vectors = [t[2] for t in states]
        out.bundle = bundle
    return out


def richardson(values):
    """Extrapolate a sequence on grids ``h, h/2, h/4, ...``.

    Returns ``(extrapolated, order, error_estimate)``.  The observed order is
    used when it lies in ``[0.5, 2.5]``, otherwise first order is assumed.
    """
    v = [float(x) for x in values]
    if len(v) == 1:
        return v[0], float("nan"), float("inf")
    if len(v) == 2:
        p = 1.0
        d2 = v[1] - v[0]
    else:
        d1 = v[-2] - v[-3]
        d2 = v[-1] - v[-2]
        p = 1.0
        if d1 != 0 and d2 != 0 and d1 / d2 > 0:
            q = math.log2(d1 / d2)
            if 0.5 <= q <= 2.5:
                p = q
    ext = v[-1] + d2 / (2.0**p - 1.0)
    return ext, p, abs(ext - v[-1])


# ----------------------------------------------------------------------------
# reports


@dataclass
class BracketedEigenvalue:
    m: int
    lower: float
    upper: float
    transparent: float
    extrapolated: float
    tau: float
    parity: Parity
    score: float
    near_threshold: bool = False

    def to_dict(self):
        d = asdict(self)
        d["parity"] = self.parity.value
        return d


@dataclass
class SpectrumReport:
    spec: WaveguideSpec
    E1: float
    E1h: float
    count: int
    eigenvalues: list
    near_threshold: list
    levels: list
    spectrum_edge: float
    margin: float
    warnings: list = field(default_factory=list)

    @property
    def values(self) -> list:
        return [e.extrapolated for e in self.eigenvalues]

    def to_dict(self) -> dict:
        return {
            "d": self.spec.d,
            "ell": self.spec.ell,
            "variant": self.spec.variant.value,
            "E1": self.E1,
            "E1h": self.E1h,
            "count": self.count,
            "spectrum_edge": self.spectrum_edge,
            "margin": self.margin,
            "eigenvalues": [e.to_dict() for e in self.eigenvalues],
            "near_threshold": [e.to_dict() for e in self.near_threshold],
            "levels": [{"level": lv.level, "hx": lv.hx, "hy": lv.hy, "L": lv.L, "nx": lv.nx,
                        "ny": lv.ny, "E1h": lv.E1h, "transparent": lv.transparent}
                       for lv in self.levels],
            "warnings": list(self.warnings),
        }

    def csv_rows(self):
        fin = self.levels[-1]
        for e in self.eigenvalues + self.near_threshold:
            yield {"ell": self.spec.ell, "m": e.m, "lower": e.lower, "upper": e.upper,
                   "extrapolated": e.extrapolated, "parity": e.parity.value, "E1": self.E1,
                   "L": fin.L, "nx": fin.nx, "ny": fin.ny}


CSV_COLUMNS = ("ell", "m", "lower", "upper", "extrapolated", "parity", "E1", "L", "nx", "ny")


def discrete_spectrum(spec: WaveguideSpec, numerics: Numerics = Numerics(),
                      brackets: bool = True) -> SpectrumReport:
    """Bound states below the threshold with brackets and extrapolation."""
    L = numerics.truncation(spec)
    if L < spec.ell + 3.0 * spec.d - 1e-12:
        raise GeometryError("L must be >= ell + 3d")
    levels = [solve_level(spec, numerics, k, brackets=brackets) for k in range(numerics.levels)]
    fin = levels[-1]
    E1 = spec.E1
    margin = numerics.margin * E1
    nmax = len(fin.transparent)
    warnings = []
    eigs, near = [], []
    for m in range(nmax):
        seq = [lv.transparent[m] for lv in levels if len(lv.transparent) > m]
        # a state missing on coarse levels only has its finest values
        ext, _, tau = richardson(seq)
        if len(seq) < 2:
            tau = abs(E1 - fin.E1h) + abs(fin.transparent[m] - fin.E1h)
        lower = fin.lower[m] if m < len(fin.lower) else float("nan")
        upper = fin.upper[m] if m < len(fin.upper) else float("nan")
        be = BracketedEigenvalue(m + 1, lower, upper, fin.transparent[m], ext, tau,
                                 fin.parities[m], fin.scores[m])
        if ext >= E1 - margin or fin.transparent[m] >= fin.E1h - margin:
            be.near_threshold = True
            near.append(be)
        else:
            eigs.append(be)
    if near:
        warnings.append(f"{len(near)} eigenvalue(s) within {margin:.3g} of E1: count uncertain")
    edge = min(fin.transparent[:1] + [fin.E1h])
    return SpectrumReport(spec, E1, fin.E1h, len(eigs), eigs, near, levels, edge, margin, warnings)


def count_states(spec: WaveguideSpec, numerics: Numerics = Numerics(), level: int = 0) -> int:
    """Exact number of discrete bound states below the discrete threshold."""
    grid = build_grid(spec, numerics.gridspec(spec, level))
    bundle = assemble(grid, transparent_end(0.0, numerics.n_modes))
    return TransparentProblem(bundle, 0).count_below_threshold()


# ----------------------------------------------------------------------------
# validation of the inequalities


@dataclass
class BracketCheck:
    m: int
    value: float
    lo: float
    hi: float
    tau: float
    passed: bool


@dataclass
class BracketingReport:
    ell: float
    checks: list
    aux_bounds: list
    count_twisted: int
    count_aux: int
    sandwich_passed: bool
    aux_band_passed: bool

    @property
    def passed(self) -> bool:
        return (all(c.passed for c in self.checks) and all(c.passed for c in self.aux_bounds)
                and self.sandwich_passed and self.aux_band_passed)

    def violations(self) -> int:
        return sum(not c.passed for c in self.checks)


def check_aux_bounds(report: SpectrumReport) -> list:
    """Strict bounds ``pi^2 (m-1)^2/(4 ell^2) < L*_m < pi^2 m^2/(4 ell^2)``."""
    out = []
    ell = report.spec.ell
    for e in report.eigenvalues + report.near_threshold:
        lo, hi = aux_eigenvalue_bounds(e.m, ell)
        out.append(BracketCheck(e.m, e.extrapolated, lo, hi, e.tau,
                                lo - e.tau < e.extrapolated < hi + e.tau))
    return out


def validate_bracketing(ell: float, numerics: Numerics = Numerics(), d: float = 1.0,
                        twisted: SpectrumReport | None = None,
                        aux: SpectrumReport | None = None) -> BracketingReport:
    """Check ``L*_{2m-1}(2 ell) <= L_m(ell) <= L*_{2m}(2 ell)`` per ``m`` plus the
    auxiliary bounds, the count sandwich and the auxiliary count band."""
    if twisted is None:
        twisted = discrete_spectrum(WaveguideSpec(d, ell, Variant.TWISTED), numerics)
    if aux is None:
        aux = discrete_spectrum(WaveguideSpec(d, 2 * ell, Variant.AUXILIARY), numerics)
    tw = twisted.eigenvalues + twisted.near_threshold
    ax = aux.eigenvalues + aux.near_threshold
    E1 = twisted.E1
    checks = []
    for e in tw:
        i_lo, i_hi = 2 * e.m - 1, 2 * e.m
        a_lo = ax[i_lo - 1] if len(ax) >= i_lo else None
        a_hi = ax[i_hi - 1] if len(ax) >= i_hi else None
        lo = a_lo.extrapolated if a_lo else -math.inf
        hi = a_hi.extrapolated if a_hi else E1
        tau = e.tau + max(a_lo.tau if a_lo else 0.0, a_hi.tau if a_hi else 0.0)
        ok = (a_lo is not None) and (lo - tau <= e.extrapolated <= hi + tau)
        checks.append(BracketCheck(e.m, e.extrapolated, lo, hi, tau, ok))
    n_tw = count_states(twisted.spec, numerics, numerics.levels - 1)
    n_ax = count_states(aux.spec, numerics, numerics.levels - 1)
    sandwich = n_ax // 2 <= n_tw <= n_ax // 2 + 1
    lo_b, hi_b = aux_count_band(2 * ell, d)
    band = lo_b <= n_ax <= hi_b
    return BracketingReport(ell, checks, check_aux_bounds(aux), n_tw, n_ax, sandwich, band)


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    reports: list
    monotone_violations: list
    count_violations: list

    @property
    def ok(self) -> bool:
        return not self.monotone_violations and not self.count_violations


def _sweep_job(args):
    spec, numerics, brackets = args
    return discrete_spectrum(spec, numerics, brackets)


def sweep(ell_values, template: WaveguideSpec, numerics: Numerics = Numerics(),
          jobs: int = 1, brackets: bool = False, tol: float | None = None) -> SweepResult:
    """Reports for ascending ``ell`` values with monotonicity diagnostics."""
    ells = [float(x) for x in ell_values]
    if any(b <= a for a, b in zip(ells, ells[1:])):
        raise ValueError("ell values must be strictly ascending")
    tasks = [(template.with_ell(e), numerics, brackets) for e in ells]
    if jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_sweep_job, tasks))
    else:
        reports = [_sweep_job(t) for t in tasks]
    return check_sweep(reports, tol)


def check_sweep(reports, tol: float | None = None) -> SweepResult:
    mono, counts = [], []
    for a, b in zip(reports, reports[1:]):
        if b.count < a.count:
            counts.append((a.spec.ell, b.spec.ell))
        for ea, eb in zip(a.eigenvalues, b.eigenvalues):
            t = tol if tol is not None else ea.tau + eb.tau
            if eb.extrapolated > ea.extrapolated + t:
                mono.append((ea.m, a.spec.ell, b.spec.ell))
    return SweepResult(list(reports), mono, counts)


# ----------------------------------------------------------------------------
# truncation physics


@dataclass
class TruncationGap:
    L_values: list
    gaps: list
    lam: float
    slope: float
    predicted: float

    @property
    def relative_error(self) -> float:
        return abs(self.slope - self.predicted) / self.predicted


def truncation_gap(spec: WaveguideSpec, L_values, ny: int = 16, aspect: float = 1.0) -> TruncationGap:
    """Dirichlet-minus-Neumann gap of the lowest eigenvalue versus ``L`` and
    the fitted log-slope compared with ``2 sqrt(E1 - lam)``."""
    Ls = [float(x) for x in L_values]
    gaps = []
    num = Numerics(ny=ny, aspect=aspect, levels=1)
    lam_t = None
    for L in Ls:
        gs = replace(num, L=L).gridspec(spec, 0)
        grid = build_grid(spec, gs)
        lo = smallest_eigs(assemble(grid, NEUMANN_END).A, EigenRequest(k=1, sigma=0.0)).values[0]
        hi = smallest_eigs(assemble(grid, DIRICHLET_END).A, EigenRequest(k=1, sigma=0.0)).values[0]
        gaps.append(hi - lo)
        if lam_t is None:
            b = assemble(grid, transparent_end(0.0))
            lam_t = TransparentProblem(b, 0).solve_state(1)[0]
            E1h = b.E1h
    slope = -np.polyfit(Ls, np.log(gaps), 1)[0]
    return TruncationGap(Ls, gaps, lam_t, float(slope), 2.0 * math.sqrt(E1h - lam_t))
