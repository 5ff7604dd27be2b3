"""Truncated-strip grids and the 5-point Laplacian with mixed boundary data.

The discrete operator is assembled from the quadratic form

    sum over edges  w_e (u_a - u_b)^2 / h_e^2

with trapezoidal node weights, which reproduces the usual 5-point stencil in
the interior and the second-order mirror (ghost node) closure on Neumann
sides.  The matrix handed out is the symmetrised operator
``W^{1/2} A W^{-1/2}`` so it is exactly symmetric; grid functions are
recovered with :meth:`OperatorBundle.to_grid`.

Transparent ends use the exact discrete Dirichlet-to-Neumann map of the
semi-infinite uniform strip: mode ``m`` of the end column gets the ghost
value ``rho_m u_m`` where ``rho_m + 1/rho_m = 2 + hx^2 (E_m - E_1 + mu^2)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import DomainError, Variant, WaveguideSpec


class GeometryError(ValueError):
    """The truncation does not contain the boundary-condition window."""


class ConfigurationError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


class OffsetPolicy(str, enum.Enum):
    MIDCELL = "midcell"
    NODE = "node"


class EndKind(str, enum.Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    TRANSPARENT = "transparent"


@dataclass(frozen=True)
class GridSpec:
    """Requested truncation and resolution.

    ``nx`` cells over ``[-L, L]`` and ``ny`` cells over ``[0, d]``.  The
    realised grid adjusts ``hx`` so the window edge sits mid-cell (or on a
    node) and extends ``L`` outwards to the next node.  If ``window_cells`` is
    given, ``hx = 2 ell / window_cells`` exactly; grids built this way for
    different ``ell`` are dilations of each other in ``x1``.
    """

    L: float
    nx: int
    ny: int
    offset_policy: OffsetPolicy = OffsetPolicy.MIDCELL
    window_cells: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "offset_policy", OffsetPolicy(self.offset_policy))
        if self.nx < 4 or self.ny < 4:
            raise ConfigurationError("nx and ny must be >= 4")
        if self.nx % 2:
            raise ConfigurationError("nx must be even")
        if not self.L > 0:
            raise ConfigurationError("L must be > 0")
        if self.window_cells is not None and self.window_cells < 1:
            raise ConfigurationError("window_cells must be >= 1")


@dataclass(frozen=True)
class EndCondition:
    kind: EndKind = EndKind.NEUMANN
    mu: float | None = None
    n_modes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EndKind(self.kind))
        if self.kind is EndKind.TRANSPARENT:
            if self.mu is None:
                raise ConfigurationError("transparent end requires mu")
            if not self.mu >= 0:
                raise ConfigurationError("transparent end requires mu >= 0")
            if self.n_modes is not None and self.n_modes < 1:
                raise ConfigurationError("n_modes must be >= 1")


DIRICHLET_END = EndCondition(EndKind.DIRICHLET)
NEUMANN_END = EndCondition(EndKind.NEUMANN)


def transparent_end(mu: float = 0.0, n_modes: int | None = None) -> EndCondition:
    return EndCondition(EndKind.TRANSPARENT, mu, n_modes)


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor grid on ``[-L, L] x [0, d]`` with boundary tags.

    ``twice_pos[i]`` is the integer ``2 x1_i / hx``; window membership is
    decided on these integers so no node is misclassified by rounding.
    ``dirichlet[i, j]`` is True on nodes of the Dirichlet boundary set.
    """

    spec: WaveguideSpec
    gridspec: GridSpec
    hx: float
    hy: float
    x: np.ndarray
    y: np.ndarray
    twice_pos: np.ndarray
    window_cells: int
    dirichlet: np.ndarray

    @property
    def ncol(self) -> int:
        return self.x.size

    @property
    def nrow(self) -> int:
        return self.y.size

    @property
    def L(self) -> float:
        return float(self.x[-1])

    @property
    def nx(self) -> int:
        return self.ncol - 1

    @property
    def ny(self) -> int:
        return self.nrow - 1

    def column_of(self, x1: float) -> int:
        """Index of the node column closest to ``x1``."""
        return int(np.argmin(np.abs(self.x - x1)))

    def first_column_at_or_beyond(self, x1: float) -> int:
        idx = np.nonzero(self.x >= x1 - 1e-12 * max(1.0, abs(x1)))[0]
        if idx.size == 0:
            raise GeometryError(f"no grid column at or beyond x1={x1}")
        return int(idx[0])


def build_grid(spec: WaveguideSpec, gs: GridSpec) -> Grid:
    ell = spec.ell
    if not gs.L > ell:
        raise GeometryError(f"L={gs.L} must exceed ell={ell}")
    hx0 = 2.0 * gs.L / gs.nx
    if ell > 0:
        p = gs.window_cells if gs.window_cells is not None else max(1, int(round(2.0 * ell / hx0)))
        hx = 2.0 * ell / p
    else:
        if gs.window_cells is not None:
            raise ConfigurationError("window_cells needs ell > 0")
        p = 0
        hx = hx0
    # node family: positions (k + o) hx, o in {0, 1/2}; 2*pos integers
    if gs.offset_policy is OffsetPolicy.MIDCELL:
        half = (p % 2 == 0)
    else:
        half = (p % 2 == 1)
    o2 = 1 if half else 0
    # smallest K with (K + o) hx >= L (up to rounding)
    K = int(math.ceil(gs.L / hx - o2 / 2.0 - 1e-9))
    top2 = 2 * K + o2
    twice_pos = np.arange(-top2, top2 + 1, 2, dtype=np.int64)
    x = twice_pos * (hx / 2.0)
    hy = spec.d / gs.ny
    y = np.arange(gs.ny + 1) * hy
    y[-1] = spec.d

    ncol, nrow = x.size, y.size
    dirichlet = np.zeros((ncol, nrow), dtype=bool)
    right = twice_pos > p
    left = twice_pos < -p
    if spec.variant is Variant.TWISTED:
        dirichlet[right, 0] = True
        dirichlet[left, -1] = True
    else:
        dirichlet[right | left, 0] = True
    return Grid(spec, gs, hx, hy, x, y, twice_pos, p, dirichlet)


@dataclass(frozen=True, eq=False)
class EndModes:
    """Discrete transverse modes of an end column.

    ``rows`` are the free row indices, ``E`` the ascending eigenvalues of the
    discrete transverse operator, ``Q`` its Euclidean-orthonormal
    eigenvectors (symmetrised coordinates) and ``chi`` the same modes as
    functions normalised by the trapezoid rule (``sum hy*wy*chi^2 = 1``).
    """

    column: int
    rows: np.ndarray
    E: np.ndarray
    Q: np.ndarray
    chi: np.ndarray


def _transverse_operator(rows: np.ndarray, nrow: int, hy: float, wy: np.ndarray) -> np.ndarray:
    """Symmetrised 1-D operator -d^2/dx2^2 on the free rows of one column."""
    n = rows.size
    T = np.zeros((n, n))
    pos = {int(r): k for k, r in enumerate(rows)}
    for k, r in enumerate(rows):
        edges = int(r > 0) + int(r < nrow - 1)
        T[k, k] = edges / (hy * hy * wy[r])
        if r + 1 in pos:
            kk = pos[r + 1]
            v = -1.0 / (hy * hy * math.sqrt(wy[r] * wy[r + 1]))
            T[k, kk] = v
            T[kk, k] = v
    return T


def end_modes(grid: Grid, column: int) -> EndModes:
    rows = np.nonzero(~grid.dirichlet[column])[0]
    wy = _row_weights(grid)
    T = _transverse_operator(rows, grid.nrow, grid.hy, wy)
    E, Q = np.linalg.eigh(T)
    # fix signs: positive next to the Dirichlet side (continuum convention)
    dir_bottom = grid.dirichlet[column, 0]
    probe = 0 if dir_bottom else -1
    for m in range(Q.shape[1]):
        if Q[probe, m] < 0:
            Q[:, m] = -Q[:, m]
    chi = Q / np.sqrt(grid.hy * wy[rows])[:, None]
    return EndModes(column, rows, E, Q, chi)


def _row_weights(grid: Grid) -> np.ndarray:
    wy = np.ones(grid.nrow)
    wy[0] = wy[-1] = 0.5
    return wy


def dtn_ratio(hx: float, kappa):
    """Ghost-to-boundary ratio ``rho = exp(-2 asinh(hx kappa / 2))`` of a
    mode decaying with continuum rate ``kappa``, and ``d rho / d kappa``."""
    kappa = np.asarray(kappa, dtype=float)
    rho = np.exp(-2.0 * np.arcsinh(0.5 * hx * kappa))
    drho = -rho * hx / np.sqrt(1.0 + 0.25 * (hx * kappa) ** 2)
    return rho, drho


@dataclass(frozen=True, eq=False)
class OperatorBundle:
    """Assembled operator plus everything needed to interpret its vectors.

    ``A`` acts on symmetrised node values ``v = sqrt(W) u`` where ``W`` holds
    the trapezoid weights, so ``v . v`` is the L2 norm of the grid function.
    """

    grid: Grid
    end: EndCondition
    A: sp.csr_matrix
    index: np.ndarray
    free: np.ndarray
    node_ij: np.ndarray
    node_coords: np.ndarray
    weights: np.ndarray
    wx: np.ndarray
    parity_perm: np.ndarray | None
    ends: dict
    E1h: float
    A_stencil: sp.csr_matrix = field(repr=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def dirichlet_mask(self) -> np.ndarray:
        """Grid nodes eliminated from the unknowns."""
        return ~self.free

    def to_grid(self, v) -> np.ndarray:
        """Grid function ``u`` (ncol x nrow, zeros on eliminated nodes)."""
        u = np.zeros(self.free.shape)
        u[self.free] = 0.0
        u[self.node_ij[:, 0], self.node_ij[:, 1]] = np.asarray(v) / np.sqrt(self.weights)
        return u

    def from_grid(self, u) -> np.ndarray:
        u = np.asarray(u)
        return u[self.node_ij[:, 0], self.node_ij[:, 1]] * np.sqrt(self.weights)

    def dtn_matrix(self, mu: float, derivative: bool = False) -> sp.csr_matrix:
        """End-column DtN contribution at offset ``mu`` (or its mu-derivative)."""
        return _dtn_part(self, mu, derivative)

    def with_mu(self, mu: float) -> "OperatorBundle":
        """Same transparent bundle re-closed at another spectral offset."""
        if self.end.kind is not EndKind.TRANSPARENT:
            raise ConfigurationError("with_mu needs a transparent bundle")
        end = EndCondition(EndKind.TRANSPARENT, float(mu), self.end.n_modes)
        A = (self.A_stencil + _dtn_part(self, mu)).tocsr()
        return OperatorBundle(self.grid, end, A, self.index, self.free, self.node_ij,
                              self.node_coords, self.weights, self.wx, self.parity_perm,
                              self.ends, self.E1h, self.A_stencil)


def _parity_map_ij(grid: Grid, i: np.ndarray, j: np.ndarray):
    if grid.spec.variant is Variant.TWISTED:
        return grid.ncol - 1 - i, grid.nrow - 1 - j
    return grid.ncol - 1 - i, j


def assemble(grid: Grid, end: EndCondition = NEUMANN_END) -> OperatorBundle:
    ncol, nrow = grid.ncol, grid.nrow
    hx, hy = grid.hx, grid.hy
    free = ~grid.dirichlet.copy()
    if end.kind is EndKind.DIRICHLET:
        free[0, :] = False
        free[-1, :] = False
    wx = np.ones(ncol)
    if end.kind is EndKind.NEUMANN:
        wx[0] = wx[-1] = 0.5
    wy = _row_weights(grid)

    index = -np.ones((ncol, nrow), dtype=np.int64)
    ii, jj = np.nonzero(free)  # row-major over (i, j): column-by-column ordering
    n = ii.size
    index[ii, jj] = np.arange(n)

    # x-edges that exist in the form (neighbour inside the grid, or a ghost
    # for transparent ends)
    has_left = ii > 0
    has_right = ii < ncol - 1
    if end.kind is EndKind.TRANSPARENT:
        has_left = np.ones(n, dtype=bool)
        has_right = np.ones(n, dtype=bool)
    nxe = has_left.astype(float) + has_right.astype(float)
    nye = (jj > 0).astype(float) + (jj < nrow - 1).astype(float)
    diag = nxe / (hx * hx * wx[ii]) + nye / (hy * hy * wy[jj])

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [diag]
    # x-neighbours (i, j) - (i+1, j)
    sel = (ii < ncol - 1)
    a = np.nonzero(sel)[0]
    b = index[ii[a] + 1, jj[a]]
    ok = b >= 0
    a, b = a[ok], b[ok]
    v = -1.0 / (hx * hx * np.sqrt(wx[ii[a]] * wx[ii[b]]))
    rows += [a, b]
    cols += [b, a]
    vals += [v, v]
    # y-neighbours (i, j) - (i, j+1)
    sel = (jj < nrow - 1)
    a = np.nonzero(sel)[0]
    b = index[ii[a], jj[a] + 1]
    ok = b >= 0
    a, b = a[ok], b[ok]
    v = -1.0 / (hy * hy * np.sqrt(wy[jj[a]] * wy[jj[b]]))
    rows += [a, b]
    cols += [b, a]
    vals += [v, v]
    A_st = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()
    A_st.sort_indices()

    weights = hx * hy * wx[ii] * wy[jj]
    coords = np.column_stack([grid.x[ii], grid.y[jj]])
    node_ij = np.column_stack([ii, jj])

    pi, pj = _parity_map_ij(grid, ii, jj)
    perm = index[pi, pj]
    if np.any(perm < 0) or np.any(np.sort(perm) != np.arange(n)):
        perm = None

    # transverse modes at the two end columns; the left block is the mirror
    # of the right one so parity commutation holds bit for bit
    ends = {}
    right_col = ncol - 1 if end.kind is not EndKind.DIRICHLET else ncol - 2
    left_col = ncol - 1 - right_col
    rm = end_modes(grid, right_col)
    ends["right"] = rm
    lrows = np.nonzero(free[left_col])[0]
    _, mirror_rows = _parity_map_ij(grid, np.full(lrows.size, left_col), lrows)
    pos = {int(r): k for k, r in enumerate(rm.rows)}
    order = np.array([pos[int(r)] for r in mirror_rows])
    ends["left"] = EndModes(left_col, lrows, rm.E, rm.Q[order], rm.chi[order])
    E1h = float(rm.E[0])

    bundle = OperatorBundle(grid, end, A_st, index, free, node_ij, coords, weights, wx,
                            perm, ends, E1h, A_st)
    if end.kind is EndKind.TRANSPARENT:
        A = (A_st + _dtn_part(bundle, end.mu)).tocsr()
        A.sort_indices()
        bundle = OperatorBundle(grid, end, A, index, free, node_ij, coords, weights, wx,
                                perm, ends, E1h, A_st)
    return bundle


def _dtn_part(bundle: OperatorBundle, mu: float, derivative: bool = False) -> sp.csr_matrix:
    grid = bundle.grid
    hx = grid.hx
    rm = bundle.ends["right"]
    dE = np.maximum(rm.E - bundle.E1h, 0.0)
    kappa = np.sqrt(dE + mu * mu)
    rho, drho = dtn_ratio(hx, kappa)
    if derivative:
        dk = np.where(kappa > 0, mu / np.where(kappa > 0, kappa, 1.0), 1.0)
        coef = drho * dk
    else:
        coef = rho
    nm = bundle.end.n_modes
    if nm is not None:
        coef = coef.copy()
        coef[nm:] = 0.0
    B = -(rm.Q * coef) @ rm.Q.T / (hx * hx)
    B = 0.5 * (B + B.T)
    n = bundle.n
    rows, cols, vals = [], [], []
    for side in ("right", "left"):
        em = bundle.ends[side]
        idx = bundle.index[em.column, em.rows]
        # left rows are ordered so that em.Q == rm.Q[order]; map B accordingly
        if side == "right":
            Bs = B
        else:
            Bs = _mirror_block(bundle, B)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(Bs.ravel())
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    return M


def _mirror_block(bundle: OperatorBundle, B: np.ndarray) -> np.ndarray:
    grid = bundle.grid
    rm, lm = bundle.ends["right"], bundle.ends["left"]
    _, mirror_rows = _parity_map_ij(grid, np.full(lm.rows.size, lm.column), lm.rows)
    pos = {int(r): k for k, r in enumerate(rm.rows)}
    order = np.array([pos[int(r)] for r in mirror_rows])
    return B[np.ix_(order, order)]


def parity_projectors(bundle: OperatorBundle):
    """Orthogonal projectors ``(I + P)/2`` and ``(I - P)/2`` for the grid
    symmetry (point reflection for twisted, ``x1 -> -x1`` for auxiliary)."""
    P = permutation_matrix(bundle)
    I = sp.identity(bundle.n, format="csr")
    return ((I + P) * 0.5).tocsr(), ((I - P) * 0.5).tocsr()


def permutation_matrix(bundle: OperatorBundle) -> sp.csr_matrix:
    perm = bundle.parity_perm
    if perm is None:
        raise SymmetryError("grid is not symmetric under the parity map")
    n = bundle.n
    P = sp.csr_matrix((np.ones(n), (np.arange(n), perm)), shape=(n, n))
    diff = (P @ bundle.A @ P.T - bundle.A)
    if diff.nnz and np.max(np.abs(diff.data)) != 0.0:
        raise SymmetryError("operator does not commute with the parity map")
    return P


def sector_basis(bundle: OperatorBundle, sign: int) -> sp.csr_matrix:
    """Orthonormal basis (n x n_sector) of parity-even (+1) or odd (-1) vectors."""
    perm = bundle.parity_perm
    if perm is None:
        raise SymmetryError("grid is not symmetric under the parity map")
    n = bundle.n
    a = np.arange(n)
    lead = a < perm
    fixed = a == perm
    pa = a[lead]
    pb = perm[lead]
    s = 1.0 / math.sqrt(2.0)
    rows = [pa, pb]
    colsn = np.arange(pa.size)
    cols = [colsn, colsn]
    vals = [np.full(pa.size, s), np.full(pa.size, s * sign)]
    m = pa.size
    if sign > 0:
        fa = a[fixed]
        rows.append(fa)
        cols.append(np.arange(m, m + fa.size))
        vals.append(np.ones(fa.size))
        m += fa.size
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, m))


def reduce_to_sector(A: sp.spmatrix, U: sp.spmatrix) -> sp.csr_matrix:
    B = (U.T @ A @ U).tocsr()
    B = ((B + B.T) * 0.5).tocsr()
    B.sort_indices()
    return B


def dump_matrix(A: sp.spmatrix, path) -> None:
    """Write ``A`` as coordinate triplets ``row col value`` (0-based), one per
    line, preceded by a ``# shape n m nnz`` header."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    with open(path, "w") as fh:
        fh.write(f"# shape {C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for k in order:
            fh.write(f"{C.row[k]} {C.col[k]} {C.data[k]:.17g}\n")


def dump_grid(bundle: OperatorBundle, path) -> None:
    """Write unknowns as ``index x1 x2 tag`` lines (tag: interior, neumann, end)."""
    g = bundle.grid
    with open(path, "w") as fh:
        fh.write("# index x1 x2 tag\n")
        for k, (i, j) in enumerate(bundle.node_ij):
            if i in (0, g.ncol - 1):
                tag = "end"
            elif j in (0, g.nrow - 1):
                tag = "neumann"
            else:
                tag = "interior"
            fh.write(f"{k} {g.x[i]:.17g} {g.y[j]:.17g} {tag}\n")


def apply_to_function(bundle: OperatorBundle, f) -> np.ndarray:
    """Apply the (unsymmetrised) discrete operator to samples of ``f(x1, x2)``.

    Returns a grid array with NaN on eliminated nodes.
    """
    u = f(bundle.node_coords[:, 0], bundle.node_coords[:, 1])
    v = u * np.sqrt(bundle.weights)
    Av = bundle.A @ v
    out = np.full(bundle.free.shape, np.nan)
    out[bundle.node_ij[:, 0], bundle.node_ij[:, 1]] = Av / np.sqrt(bundle.weights)
    return out


def line_operator(n: int, h: float, lo: str = "dirichlet", hi: str = "dirichlet") -> sp.csr_matrix:
    """Symmetrised 1-D ``-d^2/dt^2`` on ``n`` cells of width ``h``.

    Dirichlet ends are eliminated; Neumann ends keep their node with half
    trapezoid weight (mirror closure).
    """
    lo, hi = EndKind(lo), EndKind(hi)
    if EndKind.TRANSPARENT in (lo, hi):
        raise ConfigurationError("line_operator supports dirichlet and neumann ends")
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = lo is EndKind.NEUMANN
    keep[-1] = hi is EndKind.NEUMANN
    rows = np.nonzero(keep)[0]
    edges = np.where((rows > 0) & (rows < n), 2.0, 1.0)
    diag = edges / (h * h * w[rows])
    off = -1.0 / (h * h * np.sqrt(w[rows[:-1]] * w[rows[1:]]))
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr")


def rectangle_operator(a: float, b: float, nx: int, ny: int,
                       sides: tuple = ("dirichlet",) * 4) -> sp.csr_matrix:
    """Symmetrised 5-point ``-Laplacian`` on ``(0, a) x (0, b)``.

    ``sides`` gives the conditions at ``x1 = 0, x1 = a, x2 = 0, x2 = b``.
    Unknowns are ordered column by column as in :func:`assemble`.
    """
    Tx = line_operator(nx, a / nx, sides[0], sides[1])
    Ty = line_operator(ny, b / ny, sides[2], sides[3])
    Ix = sp.identity(Tx.shape[0], format="csr")
    Iy = sp.identity(Ty.shape[0], format="csr")
    return (sp.kron(Tx, Iy) + sp.kron(Ix, Ty)).tocsr()
