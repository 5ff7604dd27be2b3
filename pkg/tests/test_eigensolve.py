import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from twistguide.discretize import line_operator, rectangle_operator
from twistguide.eigensolve import (
    EigenRequest,
    SingularShiftError,
    attainable_tol,
    count_below,
    eigs_in_interval,
    inertia,
    inertia_dense,
    smallest_eigs,
)


def random_sparse(n, density, seed):
    rng = np.random.default_rng(seed)
    R = sp.random(n, n, density=density, random_state=rng)
    return (R + R.T + sp.diags(rng.uniform(-1, 1, n))).tocsr()


def test_chain_lanczos_matches_analytic():
    n = 4000
    h = 1.0 / n
    A = line_operator(n, h)
    r = smallest_eigs(A, EigenRequest(k=4, tol=1e-8))
    exact = 4 / h**2 * np.sin(np.arange(1, 5) * math.pi * h / 2) ** 2
    assert r.method == "lanczos" and r.all_converged
    assert np.allclose(r.values, exact, rtol=1e-10)
    assert np.allclose(r.vectors.T @ r.vectors, np.eye(4), atol=1e-8)


def test_rectangle_unit_square():
    A = rectangle_operator(1.0, 1.0, 64, 64)
    r = smallest_eigs(A, EigenRequest(k=3, tol=1e-8))
    assert r.values[0] == pytest.approx(2 * math.pi**2, rel=5e-4)
    assert r.values[1:] == pytest.approx([5 * math.pi**2] * 2, rel=1e-3)
    h = 1 / 64
    s = lambda k: 4 / h**2 * math.sin(k * math.pi * h / 2) ** 2  # noqa: E731
    assert r.values[0] == pytest.approx(2 * s(1), rel=1e-10)


def test_random_sparse_against_dense():
    A = random_sparse(200, 0.05, 3)
    w = np.linalg.eigvalsh(A.toarray())
    r = smallest_eigs(A, EigenRequest(k=6, tol=1e-11, dense_limit=50))
    assert r.method == "lanczos"
    assert np.allclose(r.values, w[:6], atol=1e-10)


def test_interior_shift_against_dense():
    A = random_sparse(300, 0.03, 5)
    w = np.linalg.eigvalsh(A.toarray())
    r = eigs_in_interval(A, -0.2, 0.2, tol=1e-11, dense_limit=50)
    want = w[(w > -0.2) & (w < 0.2)]
    assert np.allclose(r.values, want, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(20, 120), st.integers(0, 10_000), st.floats(-1.5, 1.5))
def test_inertia_matches_dense(n, seed, sigma):
    A = random_sparse(n, 0.1, seed)
    w = np.linalg.eigvalsh(A.toarray())
    if np.min(np.abs(w - sigma)) < 1e-8:
        return
    neg = int(np.sum(w < sigma))
    assert inertia(A, sigma)[0] == neg
    assert inertia(A, sigma, method="block")[0] == neg
    assert inertia_dense(A, sigma)[0] == neg
    assert count_below(A, sigma) == neg


def test_inertia_singular_shift():
    A = sp.diags([1.0, 2.0, 3.0]).tocsr()
    with pytest.raises(SingularShiftError):
        inertia(A, 2.0)
    assert count_below(A, 2.0) == 1


def test_interval_count_certified():
    A = line_operator(3000, 1 / 3000)
    r = eigs_in_interval(A, 0.0, 400.0)
    exact = 4 * 3000**2 * np.sin(np.arange(1, 10) * math.pi / 6000) ** 2
    assert np.allclose(r.values, exact[exact < 400], rtol=1e-9)
    assert eigs_in_interval(A, 0.0, 5.0).values.size == 0
    with pytest.raises(ValueError):
        eigs_in_interval(A, 1.0, 1.0)


def test_deterministic_with_seed():
    A = rectangle_operator(1.0, 2.0, 40, 60)
    a = smallest_eigs(A, EigenRequest(k=3, seed=7))
    b = smallest_eigs(A, EigenRequest(k=3, seed=7))
    assert np.array_equal(a.values, b.values) and np.array_equal(a.vectors, b.vectors)


def test_request_validation_and_tolerance_floor():
    for kw in ({"k": 0}, {"tol": 0.0}, {"max_iter": 0}):
        with pytest.raises(ValueError):
            EigenRequest(**kw)
    A = line_operator(100, 1e-3)
    assert attainable_tol(A, 1e-14) > 1e-14
    assert attainable_tol(A, 1.0) == 1.0
