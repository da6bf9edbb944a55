"""Sandwich covariance for the stacked parameter (beta, sigma2_gamma, sigma2_eps).

The bread is a central-difference Jacobian of the total weighted score;
the meat is the empirical sum of outer products of per-cluster weighted
scores. Normalisation constants cancel between the two, so both are
returned unnormalised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .core import _Kernel
from .design import FitResult, GroupedDesign, VarianceComponents
from .exceptions import InferenceUnavailableError
from .influence import InfluenceSpec

__all__ = ["SandwichParts", "per_cluster_scores", "estimate_G", "sandwich", "attach_sandwich"]

_JACOBIAN_STEP_REL = 1e-5


@dataclass
class SandwichParts:
    G: np.ndarray
    F: np.ndarray
    cov: np.ndarray


def _split_theta(design: GroupedDesign, theta: np.ndarray) -> tuple[np.ndarray, VarianceComponents]:
    theta = np.asarray(theta, dtype=float).ravel()
    p = design.p
    if theta.size != p + 2:
        raise ValueError(f"theta must have length p + 2 = {p + 2}, got {theta.size}")
    return theta[:p], VarianceComponents(sigma2_gamma=theta[p], sigma2_eps=theta[p + 1])


def per_cluster_scores(
    design: GroupedDesign, theta: np.ndarray, spec: InfluenceSpec
) -> np.ndarray:
    """(m, p+2) matrix of per-cluster weighted score contributions.

    Row j is the j-th cluster's contribution, cluster weight included, to
    the stacked estimating equations; rows sum to the total weighted score.
    """
    beta, vc = _split_theta(design, theta)
    kernel = _Kernel(design, beta, vc, spec)
    beta_block = kernel.score_beta_by_cluster()
    row_gamma, row_eps = kernel.variance_rows_by_cluster()
    return np.column_stack([beta_block, row_gamma, row_eps])


def _total_score(design: GroupedDesign, theta: np.ndarray, spec: InfluenceSpec) -> np.ndarray:
    return per_cluster_scores(design, theta, spec).sum(axis=0)


def estimate_G(
    design: GroupedDesign,
    theta: np.ndarray,
    spec: InfluenceSpec,
    step_rel: float = _JACOBIAN_STEP_REL,
) -> np.ndarray:
    """Central-difference Jacobian of the total weighted score in theta.

    Step ``step_rel * max(1, |theta_k|)`` per coordinate; for variance
    coordinates near their lower bound the difference window is shifted
    up so both evaluation points stay admissible.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    p2 = theta.size
    p = design.p
    G = np.empty((p2, p2))
    lower = np.full(p2, -np.inf)
    lower[p] = 0.0  # sigma2_gamma
    lower[p + 1] = 1e-12  # sigma2_eps must stay positive
    for k in range(p2):
        h = step_rel * max(1.0, abs(theta[k]))
        lo = theta[k] - h
        if lo < lower[k]:
            lo = lower[k]
        hi = lo + 2.0 * h
        th_lo, th_hi = theta.copy(), theta.copy()
        th_lo[k], th_hi[k] = lo, hi
        G[:, k] = (_total_score(design, th_hi, spec) - _total_score(design, th_lo, spec)) / (
            hi - lo
        )
    return G


def sandwich(
    design: GroupedDesign, theta: np.ndarray, spec: InfluenceSpec
) -> SandwichParts:
    """Bread-and-meat covariance ``G^{-1} F G^{-T}`` at theta, symmetrised."""
    G = estimate_G(design, theta, spec)
    phi = per_cluster_scores(design, theta, spec)
    F = phi.T @ phi
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise InferenceUnavailableError(f"score Jacobian is singular: {exc}") from exc
    if not np.all(np.isfinite(Ginv)):
        raise InferenceUnavailableError("score Jacobian inverse is non-finite")
    cov = Ginv @ F @ Ginv.T
    cov = 0.5 * (cov + cov.T)
    return SandwichParts(G=G, F=F, cov=cov)


def attach_sandwich(design: GroupedDesign, result: FitResult, spec: InfluenceSpec) -> None:
    """Fill the inference fields of a fit result in place.

    On failure the point estimates stay valid and ``inference_error``
    carries the reason; standard errors are left absent.
    """
    try:
        parts = sandwich(design, result.theta, spec)
    except InferenceUnavailableError as exc:
        result.inference_error = str(exc)
        return
    p = design.p
    cov_beta = parts.cov[:p, :p]
    var_diag = np.clip(np.diag(cov_beta), 0.0, None)
    se = np.sqrt(var_diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0.0, result.beta / se, np.nan)
    result.cov_beta = cov_beta
    result.se = se
    result.z = z
    result.p_value = 2.0 * norm.sf(np.abs(z))
