"""Invariant suite behind ``twistguide validate``.

Each check returns a record ``{"check", "passed", "detail"}``; details hold
the numbers that decided the outcome, so two runs with the same seed give
identical records.
"""

from __future__ import annotations

import math

from .criticality import CriticalNumerics, Method, auxiliary_critical_lengths, critical_length
from .model import Variant, WaveguideSpec, aux_count_band
from .spectrum import Numerics, Parity, check_aux_bounds, discrete_spectrum, validate_bracketing

AUX_LENGTHS = (0.5, 1.5, 2.5, 3.5)


def _g(x) -> str:
    return format(float(x), ".17g")


def _record(name: str, passed: bool, detail: str) -> dict:
    return {"check": name, "passed": bool(passed), "detail": detail}


def check_threshold(num: Numerics, d: float = 1.0) -> dict:
    """Without a window there are no bound states and the edge is the threshold."""
    rep = discrete_spectrum(WaveguideSpec(d, 0.0), num, brackets=False)
    rel = abs(rep.spectrum_edge - rep.E1) / rep.E1
    ok = rep.count == 0 and not rep.near_threshold and rel < 2e-3
    return _record("threshold", ok, f"count={rep.count} edge={_g(rep.spectrum_edge)} rel={_g(rel)}")


def check_auxiliary(num: Numerics, lengths=AUX_LENGTHS, d: float = 1.0) -> list:
    out = []
    for ell in lengths:
        rep = discrete_spectrum(WaveguideSpec(d, ell, Variant.AUXILIARY), num, brackets=False)
        bounds = check_aux_bounds(rep)
        bad = [c.m for c in bounds if not c.passed]
        out.append(_record(f"aux_eigenvalue_bounds ell={ell:g}", not bad,
                           f"states={len(bounds)} violations={bad}"))
        lo, hi = aux_count_band(ell, d)
        n = rep.count + len(rep.near_threshold)
        out.append(_record(f"aux_count_band ell={ell:g}", lo <= n <= hi,
                           f"count={n} band=[{lo},{hi}]"))
    return out


def check_bracketing(num: Numerics, lengths, d: float = 1.0) -> list:
    out = []
    for ell in lengths:
        tw = discrete_spectrum(WaveguideSpec(d, ell), num)
        r = validate_bracketing(ell, num, d, twisted=tw)
        bad = [c.m for c in r.checks if not c.passed]
        out.append(_record(f"bracketing ell={ell:g}", bool(r.checks) and not bad,
                           f"states={len(r.checks)} violations={bad}"))
        out.append(_record(f"count_sandwich ell={ell:g}", r.sandwich_passed,
                           f"twisted={r.count_twisted} aux(2ell)={r.count_aux}"))
        if ell == max(lengths):
            out.append(check_parity(tw))
    return out


def check_parity(rep, k: int = 3, threshold: float = 1e-6) -> dict:
    """The lowest ``k`` states alternate even, odd, even, ... under the point symmetry."""
    states = (rep.eigenvalues + rep.near_threshold)[:k]
    want = [Parity.EVEN if i % 2 == 0 else Parity.ODD for i in range(k)]
    got = [s.parity for s in states]
    scores = [s.score for s in states]
    ok = len(states) == k and got == want and all(s < threshold for s in scores)
    return _record(f"parity ell={rep.spec.ell:g}", ok,
                   f"parities={[p.value for p in got]} max_score={_g(max(scores, default=math.nan))}")


def check_critical_ladder(num: CriticalNumerics, nmax: int) -> list:
    """``l*_{2n-1}/2 <= l_n <= l*_{2n}/2`` (with ``0 < l_1``)."""
    aux = auxiliary_critical_lengths(2 * nmax, num)
    out = []
    for n in range(1, nmax + 1):
        b = critical_length(n, num, Method.INDICATOR_ZERO, aux_values=aux)
        lo, hi = aux[2 * n - 1] / 2, aux[2 * n] / 2
        tau = b.uncertainty
        ok = (b.value > 0) and (lo - tau <= b.value <= hi + tau)
        out.append(_record(f"critical_ladder n={n}", ok,
                           f"ell={_g(b.value)} tau={_g(tau)} range=[{_g(lo)}, {_g(hi)}]"))
    return out


def run_validation(quick: bool = False, seed: int = 0) -> list:
    """Run the invariant suite; ``quick`` uses coarse two-level grids."""
    if quick:
        num = Numerics(ny=8, levels=2, seed=seed)
        cnum = CriticalNumerics(ny=8, levels=2, seed=seed)
        lengths, nmax = (1.0, 2.0, 3.0), 1
    else:
        num = Numerics(ny=16, levels=3, seed=seed)
        cnum = CriticalNumerics(ny=16, levels=3, seed=seed)
        lengths, nmax = (1.0, 2.0, 3.0), 2
    checks = [check_threshold(num)]
    checks += check_auxiliary(num)
    checks += check_bracketing(num, lengths)
    checks += check_critical_ladder(cnum, nmax)
    return checks
