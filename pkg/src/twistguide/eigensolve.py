"""Sparse symmetric eigensolver for the bottom of the spectrum.

* :func:`inertia` counts eigenvalues below a shift through a block
  ``L D L^T`` (Schur-complement) factorisation of ``A - sigma I`` in a
  banded ordering; by Sylvester's law the count is exact up to rounding in
  the pivots.
* :func:`smallest_eigs` runs shift-invert Lanczos with full
  reorthogonalisation, locking of converged pairs and explicit restarts on a
  sparse LU factorisation of ``A - sigma I``.
* :func:`eigs_in_interval` returns every eigenvalue in an interval and
  certifies the count by inertia.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000


class SingularShiftError(ArithmeticError):
    """The shift coincides (numerically) with an eigenvalue."""


class CountMismatchError(RuntimeError):
    """Lanczos found a different number of eigenvalues than inertia counts."""


@dataclass(frozen=True)
class EigenRequest:
    k: int = 1
    sigma: float | None = None
    tol: float = 1e-8
    max_iter: int = 50
    seed: int = 0
    ncv: int | None = None
    dense_limit: int = DENSE_LIMIT

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    sigma: float | None = None
    reshifts: list = field(default_factory=list)
    method: str = "lanczos"

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def __len__(self):
        return self.values.size


def _as_csr(A) -> sp.csr_matrix:
    if hasattr(A, "A") and hasattr(A, "grid"):
        A = A.A
    return sp.csr_matrix(A)


def attainable_tol(A, tol: float) -> float:
    """``tol`` raised to the rounding level ``100 eps ||A||_inf`` of ``A``."""
    norm = float(abs(A).sum(axis=1).max()) if sp.issparse(A) else float(np.abs(A).sum(axis=1).max())
    return max(tol, 100.0 * np.finfo(float).eps * norm)


def bandwidth(A) -> int:
    C = sp.coo_matrix(A)
    if C.nnz == 0:
        return 0
    return int(np.max(np.abs(C.row - C.col)))


def _banded_order(A: sp.csr_matrix):
    """Permutation (or None) and bandwidth for the block factorisation."""
    b0 = bandwidth(A)
    if A.shape[0] < 3:
        return None, b0
    perm = reverse_cuthill_mckee(A, symmetric_mode=True)
    b1 = bandwidth(A[perm][:, perm])
    if b1 < b0:
        return perm, b1
    return None, b0


def inertia(A, sigma: float = 0.0, *, rel_zero: float = 1e-12, method: str = "auto"):
    """Inertia ``(n_neg, n_zero, n_pos)`` of ``A - sigma I``.

    ``method="lu"`` uses a sparse LU in symmetric mode with diagonal pivots
    only, i.e. ``P (A - sigma I) P^T = L D L^T`` with the signs of ``D`` read
    off ``diag(U)``; ``method="block"`` eliminates contiguous blocks of a
    banded ordering.  ``"auto"`` tries the LU first and falls back to blocks
    if SuperLU swapped rows.

    Raises :class:`SingularShiftError` when a pivot is numerically zero, in
    which case ``n_zero`` would be unreliable.
    """
    A = _as_csr(A)
    n = A.shape[0]
    M = (A - sigma * sp.identity(n, format="csr")).tocsr()
    scale = max(abs(sigma), float(abs(M).sum(axis=1).max()), 1e-300)
    if method in ("auto", "lu"):
        try:
            lu = spla.splu(M.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SingularShiftError(f"singular pivot at shift {sigma!r}") from exc
        if np.array_equal(lu.perm_r, lu.perm_c):
            d = lu.U.diagonal()
            if np.any(np.abs(d) <= rel_zero * scale):
                raise SingularShiftError(f"singular pivot at shift {sigma!r}")
            neg = int(np.sum(d < 0))
            return neg, 0, n - neg
        if method == "lu":
            raise RuntimeError("LU factorisation used off-diagonal pivots")
        log.info("symmetric LU pivoted off the diagonal; using block elimination")
    return _inertia_block(M, scale, rel_zero, sigma)


def _inertia_block(M: sp.csr_matrix, scale: float, rel_zero: float, sigma: float):
    n = M.shape[0]
    perm, b = _banded_order(M)
    if perm is not None:
        M = M[perm][:, perm].tocsr()
    b = max(b, 1)
    neg = pos = 0
    prev_V = prev_w = None
    prev_sl = None
    for s in range(0, n, b):
        sl = slice(s, min(s + b, n))
        S = M[sl, sl].toarray()
        if prev_V is not None:
            C = M[sl, prev_sl].toarray()
            CV = C @ prev_V
            S = S - (CV / prev_w) @ CV.T
        S = 0.5 * (S + S.T)
        w, V = np.linalg.eigh(S)
        if np.any(np.abs(w) <= rel_zero * scale):
            raise SingularShiftError(f"singular pivot block at shift {sigma!r}")
        neg += int(np.sum(w < 0))
        pos += int(np.sum(w > 0))
        prev_V, prev_w, prev_sl = V, w, sl
    return neg, 0, pos


def inertia_dense(A, sigma: float = 0.0):
    """Inertia through dense Bunch-Kaufman ``LDL^T`` (oracle for tests)."""
    M = np.asarray(_as_csr(A).toarray()) - sigma * np.eye(A.shape[0])
    _, D, _ = sla.ldl(M)
    w = np.linalg.eigvalsh(D)
    tol = 1e-12 * max(1.0, np.abs(w).max())
    return int(np.sum(w < -tol)), int(np.sum(np.abs(w) <= tol)), int(np.sum(w > tol))


def count_below(A, lam: float, *, max_reshift: int = 8) -> int:
    """Number of eigenvalues of ``A`` strictly below ``lam`` (re-shifting by a
    relative 1e-10 when ``lam`` hits an eigenvalue)."""
    shift = lam
    for k in range(max_reshift):
        try:
            return inertia(A, shift)[0]
        except SingularShiftError:
            shift = lam - (k + 1) * 1e-10 * max(1.0, abs(lam))
            log.info("inertia re-shift to %r", shift)
    raise SingularShiftError(f"could not find a regular shift near {lam!r}")


def _gershgorin_lower(A: sp.csr_matrix) -> float:
    d = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    return float(np.min(d - off))


def _dense_eigs(A: sp.csr_matrix, k: int, sigma: float | None) -> EigenResult:
    Ad = A.toarray()
    w, V = np.linalg.eigh(Ad)
    if sigma is None:
        idx = np.arange(min(k, w.size))
    else:
        idx = np.sort(np.argsort(np.abs(w - sigma), kind="stable")[:k])
    w, V = w[idx], V[:, idx]
    res = np.linalg.norm(Ad @ V - V * w, axis=0)
    return EigenResult(w, V, res, np.ones(w.size, dtype=bool), sigma, [], "dense")


def _factor(A: sp.csr_matrix, sigma: float, reshifts: list):
    n = A.shape[0]
    I = sp.identity(n, format="csc")
    s = sigma
    for attempt in range(6):
        try:
            lu = spla.splu((A - s * I).tocsc(), permc_spec="COLAMD")
            return lu, s
        except RuntimeError:
            new = s - (10.0**attempt) * 1e-8 * max(1.0, abs(s))
            reshifts.append((s, new))
            log.warning("shift %r hit the spectrum, re-shifting to %r", s, new)
            s = new
    raise SingularShiftError(f"factorisation failed near shift {sigma!r}")


def _lanczos(op, v0: np.ndarray, m: int, locked: np.ndarray | None):
    """``m``-step Lanczos with CGS2 full reorthogonalisation.

    Returns the basis ``V`` (n x j) and the tridiagonal coefficients; ``j`` may
    be smaller than ``m`` on an invariant subspace.
    """
    n = v0.size
    V = np.empty((n, m + 1))

    def project(w, upto):
        for _ in range(2):
            if locked is not None and locked.shape[1]:
                w = w - locked @ (locked.T @ w)
            if upto:
                h = V[:, :upto].T @ w
                w = w - V[:, :upto] @ h
        return w

    v = project(v0, 0)
    nv = np.linalg.norm(v)
    if nv == 0:
        return V[:, :0], np.empty(0), np.empty(0)
    V[:, 0] = v / nv
    alpha = np.zeros(m)
    beta = np.zeros(m)
    for j in range(m):
        w = op(V[:, j])
        alpha[j] = V[:, j] @ w
        w = project(w, j + 1)
        b = np.linalg.norm(w)
        beta[j] = b
        if b <= 1e-12 * max(1.0, abs(alpha[j])):
            return V[:, : j + 1], alpha[: j + 1], beta[:j]
        V[:, j + 1] = w / b
    return V[:, :m], alpha, beta[: m - 1]


def smallest_eigs(A, req: EigenRequest = EigenRequest()) -> EigenResult:
    """Eigenpairs of the symmetric matrix ``A`` nearest the shift.

    With ``req.sigma`` unset, the shift is placed below the spectrum (0 when
    ``A`` is positive semidefinite, otherwise a Gershgorin bound), so the
    ``k`` smallest eigenvalues are returned.
    """
    A = _as_csr(A)
    n = A.shape[0]
    k = min(req.k, n)
    sigma = req.sigma
    if n <= req.dense_limit:
        return _dense_eigs(A, k, sigma)
    if sigma is None:
        try:
            sigma = 0.0 if inertia(A, 0.0)[0] == 0 else _gershgorin_lower(A)
        except SingularShiftError:
            sigma = _gershgorin_lower(A)
    reshifts: list = []
    lu, s = _factor(A, sigma, reshifts)
    op = lu.solve
    rng = np.random.default_rng(req.seed)
    m = req.ncv or min(n - 1, max(2 * k + 20, 40))
    locked_vecs = np.empty((n, 0))
    locked_vals: list[float] = []
    locked_res: list[float] = []
    v0 = rng.standard_normal(n)
    for it in range(req.max_iter):
        need = k - len(locked_vals)
        if need <= 0:
            break
        V, alpha, beta = _lanczos(op, v0, m, locked_vecs)
        if V.shape[1] == 0:
            v0 = rng.standard_normal(n)
            continue
        theta, S = sla.eigh_tridiagonal(alpha, beta) if beta.size else (alpha, np.ones((1, 1)))
        order = np.argsort(-np.abs(theta), kind="stable")
        theta, S = theta[order], S[:, order]
        X = V @ S[:, : min(need + 2, theta.size)]
        lam = s + 1.0 / theta[: X.shape[1]]
        R = A @ X - X * lam
        res = np.linalg.norm(R, axis=0)
        newly = []
        for i in range(min(need, X.shape[1])):
            if res[i] <= req.tol:
                newly.append(i)
            else:
                break
        if newly:
            Xn = X[:, newly]
            locked_vecs = np.column_stack([locked_vecs, Xn])
            # re-orthonormalise the locked set (Ritz vectors of a common basis
            # are already orthogonal; this guards drift across restarts)
            q, _ = np.linalg.qr(locked_vecs)
            locked_vecs = q * np.sign(np.sum(q * locked_vecs, axis=0))
            locked_vals += [float(lam[i]) for i in newly]
            locked_res += [float(res[i]) for i in newly]
        rest = [i for i in range(min(need + 2, X.shape[1])) if i not in newly]
        if rest:
            v0 = X[:, rest] @ (1.0 / (1.0 + np.arange(len(rest))))
        else:
            v0 = rng.standard_normal(n)
        if V.shape[1] < m and not newly:
            v0 = rng.standard_normal(n)
    vals = np.array(locked_vals)
    vecs = locked_vecs
    res = np.array(locked_res)
    conv = np.ones(vals.size, dtype=bool)
    if vals.size < k:
        # partial result: append best unconverged Ritz pairs, flagged
        extra = k - vals.size
        V, alpha, beta = _lanczos(op, v0, m, locked_vecs)
        theta, S = sla.eigh_tridiagonal(alpha, beta) if beta.size else (alpha, np.ones((1, 1)))
        order = np.argsort(-np.abs(theta), kind="stable")[:extra]
        X = V @ S[:, order]
        lam = s + 1.0 / theta[order]
        r = np.linalg.norm(A @ X - X * lam, axis=0)
        vals = np.concatenate([vals, lam])
        vecs = np.column_stack([vecs, X])
        res = np.concatenate([res, r])
        conv = np.concatenate([conv, np.zeros(extra, dtype=bool)])
        log.warning("Lanczos: %d of %d pairs unconverged", extra, k)
    order = np.argsort(vals, kind="stable")
    return EigenResult(vals[order], vecs[:, order], res[order], conv[order], s, reshifts)


def eigs_in_interval(A, lo: float, hi: float, tol: float = 1e-8, seed: int = 0,
                     dense_limit: int = DENSE_LIMIT) -> EigenResult:
    """All eigenvalues in ``(lo, hi)`` with a count certified by inertia."""
    if not lo < hi:
        raise ValueError("lo must be < hi")
    A = _as_csr(A)
    n_lo = count_below(A, lo)
    n_hi = count_below(A, hi)
    count = n_hi - n_lo
    n = A.shape[0]
    if count == 0:
        return EigenResult(np.empty(0), np.empty((n, 0)), np.empty(0), np.empty(0, dtype=bool),
                           None, [], "inertia")
    if n <= dense_limit:
        w, V = np.linalg.eigh(A.toarray())
        sel = (w > lo) & (w < hi)
        w, V = w[sel], V[:, sel]
        res = np.linalg.norm(A @ V - V * w, axis=0)
        found = EigenResult(w, V, res, np.ones(w.size, dtype=bool), None, [], "dense")
    else:
        # the eigenvalues nearest the midpoint are exactly those inside
        sigma = 0.5 * (lo + hi)
        found = smallest_eigs(A, EigenRequest(k=count, sigma=sigma, tol=tol, seed=seed,
                                              dense_limit=dense_limit))
        sel = (found.values > lo) & (found.values < hi)
        found = EigenResult(found.values[sel], found.vectors[:, sel], found.residuals[sel],
                            found.converged[sel], found.sigma, found.reshifts)
    if found.values.size != count:
        raise CountMismatchError(
            f"inertia counts {count} eigenvalues in ({lo}, {hi}) but the solver found "
            f"{found.values.size}")
    return found
