"""Single-level linear M-quantile regression via iterated weighted least squares.

Used standalone for flat data and as the fixed-effect initialiser of the
multilevel solver. The scale is the median absolute residual divided by
0.6745, recomputed at every iteration and floored at 1e-10.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import SingularDesignError
from .influence import InfluenceSpec, asymmetric_psi, asymmetric_psi_derivative

__all__ = ["MqFit", "fit_mq"]

SCALE_FLOOR = 1e-10


@dataclass
class MqFit:
    beta: np.ndarray
    scale: float
    iterations: int
    converged: bool


def _mad_scale(resid: np.ndarray) -> float:
    return max(float(np.median(np.abs(resid))) / 0.6745, SCALE_FLOOR)


def _iwls_weights(r: np.ndarray, spec: InfluenceSpec) -> np.ndarray:
    # psi_q(r) / r, with the derivative value at r = 0
    w = np.empty_like(r)
    nz = r != 0.0
    w[nz] = asymmetric_psi(r[nz], spec) / r[nz]
    if not nz.all():
        w[~nz] = asymmetric_psi_derivative(0.0, spec)
    return w


def fit_mq(
    X: np.ndarray,
    y: np.ndarray,
    spec: InfluenceSpec,
    row_weights: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> MqFit:
    """Fit one linear M-quantile by IWLS.

    Solves ``sum_i w_i psi_q((y_i - x_i' beta) / scale) x_i = 0`` with the
    scale recomputed from the current residuals each pass. Returns the
    best iterate with ``converged=False`` (never raises) when the maximum
    relative coefficient change stays above ``tol`` after ``max_iter``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if y.size != n:
        raise ValueError(f"X has {n} rows but y has {y.size} entries")
    if n <= p:
        raise ValueError(f"need more observations than parameters (n={n}, p={p})")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    if row_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(row_weights, dtype=float).ravel()
        if w.size != n or not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise ValueError("row_weights must be nonnegative, finite, length n")
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError(f"design matrix is rank deficient (p={p})")

    def wls(omega: np.ndarray) -> np.ndarray:
        Xw = X * omega[:, None]
        return np.linalg.solve(X.T @ Xw, Xw.T @ y)

    beta = wls(w)  # (weighted) least-squares start
    scale = _mad_scale(y - X @ beta)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        resid = y - X @ beta
        scale = _mad_scale(resid)
        omega = w * _iwls_weights(resid / scale, spec)
        beta_new = wls(omega)
        delta = np.max(np.abs(beta_new - beta)) / max(1.0, np.max(np.abs(beta)))
        beta = beta_new
        if delta < tol:
            converged = True
            break
    return MqFit(beta=beta, scale=scale, iterations=iterations, converged=converged)
