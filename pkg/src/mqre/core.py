"""Two-level M-quantile random-effects estimator with sampling weights.

Fixed effects are updated by Newton-Raphson steps and the two variance
components by a fixed-point iteration, alternating until joint
convergence. Cluster covariances are diagonal-plus-rank-one
(``V_j = diag(sigma2_eps / w1) + sigma2_gamma * J``), so every per-cluster
quantity reduces to segment sums over units; the n x n covariance is
never formed. The unweighted estimator and the Gaussian random-intercept
model are the unit-weight and identity-family special cases of the same
code path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .design import ClusterBlock, FitResult, GroupedDesign, VarianceComponents
from .exceptions import (
    DegenerateDesignError,
    NumericalError,
    SingularDesignError,
    StepSingularError,
)
from .influence import (
    InfluenceSpec,
    asymmetric_psi,
    asymmetric_psi_derivative,
    k2q_recentred,
)
from .mq import fit_mq

__all__ = [
    "build_cluster_covariance",
    "weighted_score",
    "newton_step_beta",
    "fixed_point_variance",
    "fit_mqre",
]

EPS_VARIANCE_FLOOR_REL = 1e-8
MAX_STEP_HALVINGS = 10


def build_cluster_covariance(
    block: ClusterBlock, vc: VarianceComponents
) -> tuple[np.ndarray, np.ndarray]:
    """Dense covariance ``V_j`` of one cluster and its diagonal part ``U_j``.

    ``V_j = diag(sigma2_eps / w1) + sigma2_gamma * J`` with J the all-ones
    matrix. Intended for inspection and cross-checks; the solver uses the
    rank-one structure directly.
    """
    n = block.n
    V = np.full((n, n), vc.sigma2_gamma)
    V[np.diag_indices(n)] += vc.sigma2_eps / block.w1
    return V, np.diag(np.diag(V))


class _Kernel:
    """Shared per-evaluation arrays for one (design, beta, vc, spec) point.

    All per-cluster reductions are segment sums over the flat unit arrays,
    using the closed-form inverse of diagonal-plus-rank-one matrices.
    """

    def __init__(
        self,
        design: GroupedDesign,
        beta: np.ndarray,
        vc: VarianceComponents,
        spec: InfluenceSpec,
    ) -> None:
        self.design = design
        self.spec = spec
        self.s2g = vc.sigma2_gamma
        self.starts = design.starts[:-1]
        self.ci = design.cluster_index
        self.inv_d = design.w1 / vc.sigma2_eps
        u = vc.sigma2_eps / design.w1 + vc.sigma2_gamma
        self.sqrt_u = np.sqrt(u)
        self.sum_invd = self.seg(self.inv_d)
        self.denom = 1.0 + self.s2g * self.sum_invd
        resid = design.y - design.X @ beta
        self.r = resid / self.sqrt_u
        self.psi = asymmetric_psi(self.r, spec)
        self.t = self.sqrt_u * self.psi  # U^{1/2} psi
        self.g = self.vinv(self.t)  # V^{-1} U^{1/2} psi
        self.k2 = k2q_recentred(spec)

    def seg(self, a: np.ndarray) -> np.ndarray:
        return np.add.reduceat(a, self.starts, axis=0)

    def vinv(self, x: np.ndarray) -> np.ndarray:
        """Apply the per-cluster inverse covariance to a flat vector."""
        a = x * self.inv_d
        return a - (self.s2g * self.seg(a) / self.denom)[self.ci] * self.inv_d

    def vinv_mat(self, A: np.ndarray) -> np.ndarray:
        """Column-wise :meth:`vinv` for a flat (n, p) matrix."""
        B = A * self.inv_d[:, None]
        corr = (self.s2g / self.denom)[:, None] * self.seg(B)
        return B - corr[self.ci] * self.inv_d[:, None]

    # per-cluster building blocks ------------------------------------
    def score_beta_by_cluster(self) -> np.ndarray:
        X = self.design.X
        return np.add.reduceat(
            X * (self.design.w2[self.ci] * self.g)[:, None], self.starts, axis=0
        )

    def quad_forms(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadratic forms of the influence through ZZ' and W^{-1}, per cluster."""
        quad_z = self.seg(self.g) ** 2
        quad_w = self.seg(self.g * self.g / self.design.w1)
        return quad_z, quad_w

    def traces(self) -> tuple[np.ndarray, np.ndarray]:
        """tr(V^{-1} ZZ') and tr(V^{-1} W^{-1}) per cluster."""
        tr_z = self.sum_invd / self.denom
        tr_w = (
            self.seg(self.inv_d / self.design.w1)
            - self.s2g * self.seg(self.inv_d**2 / self.design.w1) / self.denom
        )
        return tr_z, tr_w

    def variance_rows_by_cluster(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cluster contributions to the two variance estimating equations."""
        quad_z, quad_w = self.quad_forms()
        tr_z, tr_w = self.traces()
        w2 = self.design.w2
        row_gamma = -0.5 * w2 * (self.k2 * tr_z - quad_z)
        row_eps = -0.5 * w2 * (self.k2 * tr_w - quad_w)
        return row_gamma, row_eps


def _validate_inputs(design: GroupedDesign, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.size != design.p:
        raise ValueError(f"beta has length {beta.size}, design has p={design.p}")
    return beta


def _raise_nonfinite(kernel: _Kernel) -> None:
    bad = ~np.isfinite(kernel.g)
    if bad.any():
        j = int(kernel.ci[np.argmax(bad)])
        raise NumericalError(
            f"non-finite score contribution in cluster {kernel.design.ids[j]!r}"
        )


def weighted_score(
    design: GroupedDesign,
    beta: np.ndarray,
    vc: VarianceComponents,
    spec: InfluenceSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Estimating-equation values at (beta, vc): fixed-effect block and the
    two variance rows (between-cluster first, each with its -1/2 factor)."""
    beta = _validate_inputs(design, beta)
    k = _Kernel(design, beta, vc, spec)
    score_beta = design.X.T @ (design.w2[k.ci] * k.g)
    if not np.all(np.isfinite(score_beta)):
        _raise_nonfinite(k)
    row_gamma, row_eps = k.variance_rows_by_cluster()
    return score_beta, np.array([row_gamma.sum(), row_eps.sum()])


def _beta_step(kernel: _Kernel) -> tuple[np.ndarray, np.ndarray]:
    """Newton score and step matrix for the fixed effects at the kernel point."""
    design = kernel.design
    w2i = design.w2[kernel.ci]
    score = design.X.T @ (w2i * kernel.g)
    dpsi = asymmetric_psi_derivative(kernel.r, kernel.spec)
    vinv_x = kernel.vinv_mat(design.X)
    M = (design.X * (w2i * dpsi)[:, None]).T @ vinv_x
    return score, M


def _solve_beta_step(kernel: _Kernel, score: np.ndarray, M: np.ndarray) -> np.ndarray:
    try:
        step = np.linalg.solve(M, score)
    except np.linalg.LinAlgError:
        step = np.full_like(score, np.nan)
    if not np.all(np.isfinite(step)):
        dpsi = asymmetric_psi_derivative(kernel.r, kernel.spec)
        dead = np.add.reduceat(np.abs(dpsi), kernel.starts) == 0.0
        ids = [kernel.design.ids[j] for j in np.flatnonzero(dead)]
        raise StepSingularError(
            "singular Newton step matrix; clusters with all residuals "
            f"saturated: {ids!r}"
        )
    return step


def newton_step_beta(
    design: GroupedDesign,
    beta_t: np.ndarray,
    vc: VarianceComponents,
    spec: InfluenceSpec,
) -> np.ndarray:
    """One undamped Newton-Raphson update of the fixed effects."""
    beta_t = _validate_inputs(design, beta_t)
    kernel = _Kernel(design, beta_t, vc, spec)
    score, M = _beta_step(kernel)
    return beta_t + _solve_beta_step(kernel, score, M)


def _eps_floor(y: np.ndarray) -> float:
    v = float(np.var(y))
    return EPS_VARIANCE_FLOOR_REL * v if v > 0.0 else 1e-12


def fixed_point_variance(
    design: GroupedDesign,
    beta: np.ndarray,
    vc_t: VarianceComponents,
    spec: InfluenceSpec,
) -> VarianceComponents:
    """One fixed-point update of (sigma2_gamma, sigma2_eps).

    Solves the 2x2 system built from the consistency-corrected traces
    (coefficient matrix) and the influence quadratic forms (right side);
    at a fixed point both variance estimating equations vanish. Updates
    are floored at 0 for the cluster variance and at a small fraction of
    var(y) for the residual variance.
    """
    beta = _validate_inputs(design, beta)
    k = _Kernel(design, beta, vc_t, spec)
    quad_z, quad_w = k.quad_forms()
    w2 = design.w2
    rhs = np.array([w2 @ quad_z, w2 @ quad_w])

    inv_d, w1, s2g, denom = k.inv_d, design.w1, k.s2g, k.denom
    tr_zz = (k.sum_invd / denom) ** 2
    tr_zw = k.seg(inv_d**2 / w1) / denom**2
    tr_ww = (
        k.seg(inv_d**2 / w1**2)
        - 2.0 * s2g / denom * k.seg(inv_d**3 / w1**2)
        + (s2g / denom) ** 2 * k.seg(inv_d**2 / w1) ** 2
    )
    A = k.k2 * np.array(
        [[w2 @ tr_zz, w2 @ tr_zw], [w2 @ tr_zw, w2 @ tr_ww]]
    )
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12:
        raise DegenerateDesignError(
            "variance-update system is singular; the grouping cannot "
            "separate the two variance components"
        )
    s2g_new, s2e_new = np.linalg.solve(A, rhs)
    return VarianceComponents(
        sigma2_gamma=max(float(s2g_new), 0.0),
        sigma2_eps=max(float(s2e_new), _eps_floor(design.y)),
    )


def _default_init(
    design: GroupedDesign, spec: InfluenceSpec
) -> tuple[np.ndarray, VarianceComponents]:
    """Robust starting point: single-level M-quantile fit for beta, MAD-based
    within/between decomposition for the variance components."""
    rows = design.w2[design.cluster_index] * design.w1
    beta0 = fit_mq(design.X, design.y, spec, row_weights=rows).beta
    e = design.y - design.X @ beta0
    n_j = design.cluster_sizes
    mean_e = np.add.reduceat(e, design.starts[:-1]) / n_j
    within = e - mean_e[design.cluster_index]
    mad_w = 1.4826 * np.median(np.abs(within - np.median(within)))
    floor = _eps_floor(design.y)
    s2e = max(float(mad_w**2), floor)
    mad_b = 1.4826 * np.median(np.abs(mean_e - np.median(mean_e)))
    s2g = max(float(mad_b**2) - s2e / float(np.median(n_j)), 0.0)
    return beta0, VarianceComponents(sigma2_gamma=s2g, sigma2_eps=s2e)


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old)) / max(1.0, np.max(np.abs(old))))


def fit_mqre(
    design: GroupedDesign,
    spec: InfluenceSpec,
    tol: float = 1e-6,
    max_iter: int = 200,
    init: Optional[tuple[np.ndarray, VarianceComponents]] = None,
    compute_se: bool = True,
) -> FitResult:
    """Fit the two-level M-quantile random-effects model on a grouped design.

    Alternates one (damped) Newton update of the fixed effects with one
    fixed-point update of the variance components until the joint relative
    change drops below ``tol``. Weights enter exactly as supplied on the
    design; unit weights give the unweighted estimator. With
    ``compute_se`` the sandwich covariance and the derived standard
    errors, z statistics and p-values are attached; a failure there is
    reported on the result, never raised.

    Returns the best iterate with ``converged=False`` on non-convergence.
    """
    if design.p >= design.n:
        raise ValueError(f"need p < n (p={design.p}, n={design.n})")
    if np.linalg.matrix_rank(design.X) < design.p:
        raise SingularDesignError("stacked design matrix is rank deficient")

    if init is None:
        beta, vc = _default_init(design, spec)
    else:
        beta0, vc = init
        beta = np.asarray(beta0, dtype=float).ravel().copy()

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        kernel = _Kernel(design, beta, vc, spec)
        score, M = _beta_step(kernel)
        step = _solve_beta_step(kernel, score, M)
        score_norm = float(np.max(np.abs(score)))
        beta_new = beta + step
        for _ in range(MAX_STEP_HALVINGS):
            trial = _Kernel(design, beta_new, vc, spec)
            trial_norm = float(
                np.max(np.abs(design.X.T @ (design.w2[trial.ci] * trial.g)))
            )
            if trial_norm <= score_norm or not np.isfinite(trial_norm):
                break
            step *= 0.5
            beta_new = beta + step

        vc_new = fixed_point_variance(design, beta_new, vc, spec)
        rel = max(
            _rel_change(beta_new, beta),
            _rel_change(vc_new.as_array(), vc.as_array()),
        )
        beta, vc = beta_new, vc_new
        if not np.all(np.isfinite(beta)):
            raise NumericalError("fixed-effect iterate became non-finite")
        if rel < tol:
            converged = True
            break

    sb, sv = weighted_score(design, beta, vc, spec)
    score_norm = float(np.max(np.abs(np.concatenate([sb, sv]))))
    result = FitResult(
        beta=beta,
        varcomp=vc,
        q=spec.q,
        c=spec.c,
        family=spec.family,
        iterations=iterations,
        converged=converged,
        score_norm=score_norm,
        message="" if converged else (
            f"no convergence in {max_iter} iterations "
            f"(final score norm {score_norm:.3e})"
        ),
    )
    if compute_se:
        from .inference import attach_sandwich

        attach_sandwich(design, result, spec)
    return result
