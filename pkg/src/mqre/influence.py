"""Huber loss, asymmetric influence functions and their normal-theory moments.

Conventions used throughout the package: the loss is ``u**2`` on the
quadratic branch (no 1/2 factor), so the influence function carries a
factor 2; at the non-differentiable points ``u in {-c, 0, c}`` the value
follows the closed quadratic branch for ``|u| <= c`` and the ``u >= 0``
branch at the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from enum import Enum

import numpy as np

__all__ = [
    "InfluenceFamily",
    "InfluenceSpec",
    "huber_rho",
    "huber_psi",
    "asymmetric_psi",
    "asymmetric_psi_derivative",
    "k2q",
    "balancing_shift",
    "k2q_recentred",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT2PI


class InfluenceFamily(str, Enum):
    HUBER = "huber"
    IDENTITY = "identity"


@dataclass(frozen=True)
class InfluenceSpec:
    """Quantile index, tuning constant and influence family for one fit.

    ``q`` must lie strictly inside (0, 1); ``c`` is the threshold, on
    scaled-residual units, where the Huber loss switches from quadratic
    to linear. ``c`` is ignored by the identity family (the unbounded,
    expectile-type influence).
    """

    q: float
    c: float = 1.345
    family: InfluenceFamily = InfluenceFamily.HUBER

    def __post_init__(self) -> None:
        family = InfluenceFamily(self.family)
        object.__setattr__(self, "family", family)
        if not (math.isfinite(self.q) and 0.0 < self.q < 1.0):
            raise ValueError(f"quantile q must be in (0, 1), got {self.q!r}")
        if not (math.isfinite(self.c) and self.c > 0.0):
            raise ValueError(f"tuning constant c must be positive, got {self.c!r}")

    def mirrored(self) -> "InfluenceSpec":
        """Spec for the reflected problem (q -> 1 - q)."""
        return InfluenceSpec(q=1.0 - self.q, c=self.c, family=self.family)


def _check_input(u: np.ndarray, c: float) -> None:
    if not (math.isfinite(c) and c > 0.0):
        raise ValueError(f"tuning constant c must be positive, got {c!r}")
    if not np.all(np.isfinite(u)):
        raise ValueError("residuals must be finite")


def _as_array(u) -> tuple[np.ndarray, bool]:
    arr = np.asarray(u, dtype=float)
    return arr, arr.ndim == 0


def huber_rho(u, c: float):
    """Huber loss: ``u**2`` for ``|u| <= c``, else ``2*c*|u| - c**2``."""
    arr, scalar = _as_array(u)
    _check_input(arr, c)
    a = np.abs(arr)
    out = np.where(a <= c, arr * arr, 2.0 * c * a - c * c)
    return float(out) if scalar else out


def huber_psi(u, c: float):
    """Derivative of :func:`huber_rho`: ``2u`` inside, ``2c*sign(u)`` beyond."""
    arr, scalar = _as_array(u)
    _check_input(arr, c)
    out = np.where(np.abs(arr) <= c, 2.0 * arr, 2.0 * c * np.sign(arr))
    return float(out) if scalar else out


def _tilt(u: np.ndarray, q: float) -> np.ndarray:
    # q on nonnegative residuals, 1 - q on negative ones
    return np.where(u >= 0.0, q, 1.0 - q)


def asymmetric_psi(u, spec: InfluenceSpec):
    """Asymmetric influence: ``q * psi(u)`` for ``u >= 0``, ``(1-q) * psi(u)`` below."""
    arr, scalar = _as_array(u)
    if spec.family is InfluenceFamily.IDENTITY:
        if not np.all(np.isfinite(arr)):
            raise ValueError("residuals must be finite")
        out = _tilt(arr, spec.q) * 2.0 * arr
    else:
        _check_input(arr, spec.c)
        out = _tilt(arr, spec.q) * np.where(
            np.abs(arr) <= spec.c, 2.0 * arr, 2.0 * spec.c * np.sign(arr)
        )
    return float(out) if scalar else out


def asymmetric_psi_derivative(u, spec: InfluenceSpec):
    """Piecewise derivative of :func:`asymmetric_psi`.

    For the Huber family: ``2q`` on ``[0, c]``, ``2(1-q)`` on ``[-c, 0)``
    and 0 beyond the threshold; the identity family never saturates.
    """
    arr, scalar = _as_array(u)
    if spec.family is InfluenceFamily.IDENTITY:
        if not np.all(np.isfinite(arr)):
            raise ValueError("residuals must be finite")
        out = 2.0 * _tilt(arr, spec.q)
    else:
        _check_input(arr, spec.c)
        out = np.where(np.abs(arr) <= spec.c, 2.0 * _tilt(arr, spec.q), 0.0)
    return float(out) if scalar else out


def k2q(spec: InfluenceSpec) -> float:
    """Second moment ``E[psi_q(e)**2]`` of the influence under ``e ~ N(0, 1)``.

    For the Huber family it has the closed form

        4 * (q**2 + (1-q)**2) * (Phi(c) - 1/2 - c*phi(c) + c**2*(1 - Phi(c)))

    and for the identity family the limit ``2 * (q**2 + (1-q)**2)``.
    """
    qq = spec.q * spec.q + (1.0 - spec.q) * (1.0 - spec.q)
    if spec.family is InfluenceFamily.IDENTITY:
        return 2.0 * qq
    c = spec.c
    bracket = _norm_cdf(c) - 0.5 - c * _norm_pdf(c) + c * c * (1.0 - _norm_cdf(c))
    return 4.0 * qq * bracket


def _shifted_psi_moments(spec: InfluenceSpec, delta: float) -> tuple[float, float]:
    """Mean and second moment of ``psi_q(e + delta)`` for ``e ~ N(0, 1)``.

    Closed Gaussian partial moments over the four branches of the
    asymmetric influence (linear / saturated, each side of zero); the
    identity family has no saturated branches.
    """
    q = spec.q
    c = math.inf if spec.family is InfluenceFamily.IDENTITY else spec.c

    def branch(lo_u: float, hi_u: float) -> tuple[float, float, float]:
        # partial moments of u = e + delta over u in [lo_u, hi_u]
        a, b = lo_u - delta, hi_u - delta
        cdf_a = _norm_cdf(a) if a > -math.inf else 0.0
        cdf_b = _norm_cdf(b) if b < math.inf else 1.0
        pdf_a = _norm_pdf(a) if math.isfinite(a) else 0.0
        pdf_b = _norm_pdf(b) if math.isfinite(b) else 0.0
        mass = cdf_b - cdf_a
        m1 = pdf_a - pdf_b
        m2 = (cdf_b - b * pdf_b if math.isfinite(b) else cdf_b) - (
            cdf_a - a * pdf_a if math.isfinite(a) else cdf_a
        )
        mom1 = m1 + delta * mass
        mom2 = m2 + 2.0 * delta * m1 + delta * delta * mass
        return mass, mom1, mom2

    _, pos1, pos2 = branch(0.0, c)
    _, neg1, neg2 = branch(-c, 0.0)
    mean = 2.0 * q * pos1 + 2.0 * (1.0 - q) * neg1
    second = 4.0 * q * q * pos2 + 4.0 * (1.0 - q) ** 2 * neg2
    if math.isfinite(c):
        p_hi = 1.0 - _norm_cdf(c - delta)
        p_lo = _norm_cdf(-c - delta)
        mean += 2.0 * q * c * p_hi - 2.0 * (1.0 - q) * c * p_lo
        second += 4.0 * q * q * c * c * p_hi + 4.0 * (1.0 - q) ** 2 * c * c * p_lo
    return mean, second


@lru_cache(maxsize=256)
def _shift_and_moment(q: float, c: float, family: InfluenceFamily) -> tuple[float, float]:
    from scipy.optimize import brentq

    spec = InfluenceSpec(q=q, c=c, family=family)
    if abs(q - 0.5) < 1e-15:
        return 0.0, k2q(spec)
    lo, hi = -10.0, 10.0
    delta = brentq(
        lambda d: _shifted_psi_moments(spec, d)[0], lo, hi, xtol=1e-12, rtol=1e-14
    )
    return float(delta), float(_shifted_psi_moments(spec, delta)[1])


def balancing_shift(spec: InfluenceSpec) -> float:
    """Shift making the influence mean-zero under the normal reference.

    ``E[psi_q(e + delta)] = 0`` for ``e ~ N(0, 1)``; this is where scaled
    residuals concentrate at the q-th fit, so moments of the influence
    are evaluated there. Zero at q = 1/2; odd in q around 1/2.
    """
    return _shift_and_moment(spec.q, spec.c, spec.family)[0]


def k2q_recentred(spec: InfluenceSpec) -> float:
    """Influence second moment at the balancing shift.

    ``E[psi_q(e + delta_q)**2]`` with ``delta_q`` from
    :func:`balancing_shift`. This is the consistency correction the
    variance-component equations use: evaluating the moment where the
    residuals actually sit keeps those equations solvable at every q and
    reduces to :func:`k2q` at q = 1/2.
    """
    return _shift_and_moment(spec.q, spec.c, spec.family)[1]
