"""Analytic ingredients of the strip waveguide: geometry, boundary partition,
transverse modes, thresholds and the point symmetry.

The strip is ``{(x1, x2): 0 < x2 < d}``.  A window of half-length ``ell``
centred at the origin separates the Dirichlet part of the boundary from the
Neumann part.  Two layouts are supported:

* ``Variant.TWISTED``: Dirichlet on ``{x1 > ell, x2 = 0}`` and on
  ``{x1 < -ell, x2 = d}``; Neumann elsewhere.
* ``Variant.AUXILIARY``: Dirichlet on ``{|x1| > ell, x2 = 0}``; Neumann
  elsewhere (the whole top side is Neumann).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of a formula."""


class Variant(str, enum.Enum):
    TWISTED = "twisted"
    AUXILIARY = "auxiliary"


class Side(str, enum.Enum):
    RIGHT = "right"
    LEFT = "left"


@dataclass(frozen=True)
class WaveguideSpec:
    d: float = 1.0
    ell: float = 0.0
    variant: Variant = Variant.TWISTED

    def __post_init__(self):
        if not (self.d > 0 and math.isfinite(self.d)):
            raise DomainError("d must be > 0")
        if not (self.ell >= 0 and math.isfinite(self.ell)):
            raise DomainError("ell must be >= 0")
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def E1(self) -> float:
        return threshold_energy(1, self.d)

    def with_ell(self, ell: float) -> "WaveguideSpec":
        return WaveguideSpec(self.d, ell, self.variant)

    def is_dirichlet(self, x1, x2, tol: float = 0.0):
        """Boolean mask of boundary points lying on the open Dirichlet set.

        ``x2`` must be 0 or ``d`` (points on the strip sides).  Transition
        points ``|x1| = ell`` are not Dirichlet.
        """
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        bottom = np.abs(x2) <= tol
        top = np.abs(x2 - self.d) <= tol
        if self.variant is Variant.TWISTED:
            return (bottom & (x1 > self.ell)) | (top & (x1 < -self.ell))
        return bottom & (np.abs(x1) > self.ell)


def _check_mode(m) -> int:
    if int(m) != m or m < 1:
        raise DomainError(f"mode index must be an integer >= 1, got {m!r}")
    return int(m)


def _check_width(d) -> float:
    if not (d > 0 and math.isfinite(d)):
        raise DomainError(f"width must be > 0, got {d!r}")
    return float(d)


def threshold_energy(m: int, d: float) -> float:
    """Transverse energy ``pi^2 (m - 1/2)^2 / d^2`` of mode ``m``."""
    m = _check_mode(m)
    d = _check_width(d)
    return math.pi**2 * (m - 0.5) ** 2 / d**2


def chi(m: int, side: Side | str, x2, d: float):
    """Normalised transverse mode ``chi_m`` on the given side of the window.

    The right branch vanishes at ``x2 = 0``, the left branch at ``x2 = d``;
    the left branch is the mirror image ``x2 -> d - x2`` of the right one.
    """
    m = _check_mode(m)
    d = _check_width(d)
    side = Side(side)
    x2 = np.asarray(x2, dtype=float)
    if np.any((x2 < 0) | (x2 > d)):
        raise DomainError("x2 must lie in [0, d]")
    k = math.sqrt(threshold_energy(m, d))
    arg = x2 if side is Side.RIGHT else d - x2
    out = math.sqrt(2.0 / d) * np.sin(k * arg)
    return float(out) if out.ndim == 0 else out


def decay_rate(m: int, mu: float, d: float) -> float:
    """Decay rate of mode ``m`` at spectral offset ``mu``.

    The eigenvalue is ``E1 - mu^2``; mode 1 decays like ``exp(-mu |x1|)`` and
    mode ``m >= 2`` like ``exp(-sqrt(E_m - E1 + mu^2) |x1|)``.
    """
    m = _check_mode(m)
    d = _check_width(d)
    if m == 1:
        if mu < 0:
            raise DomainError("mode 1 requires mu >= 0")
        return float(mu)
    arg = threshold_energy(m, d) - threshold_energy(1, d) + mu * mu
    if arg < 0:
        raise DomainError("E_m - E1 + mu^2 must be >= 0")
    return math.sqrt(arg)


def parity_map(x1, x2, d: float):
    """Point reflection ``(x1, x2) -> (-x1, d - x2)`` about the strip centre."""
    return -np.asarray(x1, dtype=float), d - np.asarray(x2, dtype=float)


def aux_eigenvalue_bounds(m: int, ell: float) -> tuple[float, float]:
    """Open interval ``(pi^2 (m-1)^2 / (4 ell^2), pi^2 m^2 / (4 ell^2))``
    containing the m-th auxiliary eigenvalue."""
    m = _check_mode(m)
    if ell <= 0:
        raise DomainError("ell must be > 0")
    c = math.pi**2 / (4.0 * ell**2)
    return c * (m - 1) ** 2, c * m**2


def aux_count_band(ell: float, d: float) -> tuple[int, int]:
    """Admissible range ``[floor(ell/d), floor(ell/d) + 1]`` of the number of
    auxiliary eigenvalues below the threshold."""
    n = math.floor(ell / _check_width(d))
    return n, n + 1
