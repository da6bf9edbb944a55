import numpy as np
import pytest
from reference_ml import weighted_gaussian_ml

from mqre import (
    ClusterBlock,
    DegenerateDesignError,
    GroupedDesign,
    InfluenceFamily,
    InfluenceSpec,
    SingularDesignError,
    VarianceComponents,
    build_cluster_covariance,
    fit_mqre,
    fixed_point_variance,
    newton_step_beta,
    weighted_score,
)
from conftest import make_clean_design

IDENT_MEDIAN = InfluenceSpec(q=0.5, family=InfluenceFamily.IDENTITY)
HUBER_MEDIAN = InfluenceSpec(q=0.5)


def dense_gls_score(design, beta, vc):
    """Hand-coded weighted GLS score sum w_j X' V^{-1} (y - X beta)."""
    total = np.zeros(design.p)
    for blk in design.clusters:
        V, _ = build_cluster_covariance(blk, vc)
        total += blk.w2 * blk.X.T @ np.linalg.solve(V, blk.y - blk.X @ beta)
    return total


class TestWeightedScore:
    def test_reduces_to_gls_score_for_identity(self, small_design):
        # identity family, q = 1/2: U^{1/2} psi(U^{-1/2} r) = r exactly
        vc = VarianceComponents(0.5, 1.2)
        beta = np.array([0.7, 0.4])
        score_beta, _ = weighted_score(small_design, beta, vc, IDENT_MEDIAN)
        np.testing.assert_allclose(
            score_beta, dense_gls_score(small_design, beta, vc), atol=1e-9
        )

    def test_linear_in_cluster_weights(self, small_design):
        vc = VarianceComponents(0.5, 1.2)
        beta = np.array([0.7, 0.4])
        s1, v1 = weighted_score(small_design, beta, vc, HUBER_MEDIAN)
        doubled = small_design.with_weights(small_design.w1, 2.0 * small_design.w2)
        s2, v2 = weighted_score(doubled, beta, vc, HUBER_MEDIAN)
        np.testing.assert_allclose(s2, 2.0 * s1, rtol=1e-12)
        np.testing.assert_allclose(v2, 2.0 * v1, rtol=1e-12)

    def test_vanishes_at_the_fit(self, clean_design):
        tol = 1e-6
        fit = fit_mqre(clean_design, HUBER_MEDIAN, tol=tol, compute_se=False)
        assert fit.converged
        sb, sv = weighted_score(clean_design, fit.beta, fit.varcomp, HUBER_MEDIAN)
        scale = clean_design.n * np.abs(clean_design.X).max()
        assert np.max(np.abs(np.concatenate([sb, sv]))) < 10 * tol * scale


class TestNewtonStep:
    def test_single_step_hits_gls_solution(self):
        # identity family, no cluster variance: the score is linear in beta
        design = make_clean_design(m=20, n_j=6, seed=1, sigma_gamma=0.0)
        vc = VarianceComponents(0.0, 2.0)
        beta_new = newton_step_beta(design, np.array([5.0, -3.0]), vc, IDENT_MEDIAN)
        p = design.p
        XtVX = np.zeros((p, p))
        XtVy = np.zeros(p)
        for blk in design.clusters:
            V, _ = build_cluster_covariance(blk, vc)
            Vi = np.linalg.inv(V)
            XtVX += blk.X.T @ Vi @ blk.X
            XtVy += blk.X.T @ Vi @ blk.y
        np.testing.assert_allclose(beta_new, np.linalg.solve(XtVX, XtVy), atol=1e-8)

    def test_converged_beta_is_fixed_point(self, clean_design):
        fit = fit_mqre(clean_design, HUBER_MEDIAN, compute_se=False)
        beta_next = newton_step_beta(clean_design, fit.beta, fit.varcomp, HUBER_MEDIAN)
        assert np.max(np.abs(beta_next - fit.beta)) < 1e-5

    def test_step_matches_finite_difference_newton(self):
        # q = 1/2 with no saturated residuals: psi' is constant, so the
        # step matrix equals the true score Jacobian
        design = make_clean_design(m=3, n_j=5, seed=8, sigma_gamma=0.5)
        spec = InfluenceSpec(q=0.5, c=50.0)
        vc = VarianceComponents(0.4, 2.5)
        beta0 = np.array([99.0, 2.1])
        h = 1e-6
        J = np.empty((2, 2))
        for k in range(2):
            ek = np.zeros(2)
            ek[k] = h
            sp, _ = weighted_score(design, beta0 + ek, vc, spec)
            sm, _ = weighted_score(design, beta0 - ek, vc, spec)
            J[:, k] = (sp - sm) / (2 * h)
        score0, _ = weighted_score(design, beta0, vc, spec)
        fd_step = np.linalg.solve(-J, score0)
        step = newton_step_beta(design, beta0, vc, spec) - beta0
        np.testing.assert_allclose(step, fd_step, atol=1e-4)


class TestFixedPointVariance:
    def test_converged_vc_is_fixed_point(self, clean_design):
        fit = fit_mqre(clean_design, HUBER_MEDIAN, compute_se=False)
        vc_next = fixed_point_variance(
            clean_design, fit.beta, fit.varcomp, HUBER_MEDIAN
        )
        rel = np.abs(vc_next.as_array() - fit.varcomp.as_array())
        assert np.max(rel / np.maximum(fit.varcomp.as_array(), 1e-8)) < 1e-4

    def test_matches_reference_ml_variances(self, clean_design):
        fit = fit_mqre(clean_design, IDENT_MEDIAN, compute_se=False)
        _, s2g, s2e = weighted_gaussian_ml(clean_design, start=(1.0, 3.0))
        assert fit.varcomp.sigma2_gamma == pytest.approx(s2g, rel=0.02)
        assert fit.varcomp.sigma2_eps == pytest.approx(s2e, rel=0.02)

    def test_constant_response_floors_cluster_variance(self):
        blocks = [
            ClusterBlock(X=np.ones((4, 1)), y=np.full(4, 7.0), w1=np.ones(4), id=j)
            for j in range(5)
        ]
        design = GroupedDesign(blocks)
        vc = fixed_point_variance(
            design, np.array([7.0]), VarianceComponents(1.0, 1.0), HUBER_MEDIAN
        )
        assert vc.sigma2_gamma == 0.0

    def test_singleton_clusters_are_degenerate(self):
        rng = np.random.default_rng(0)
        blocks = [
            ClusterBlock(
                X=np.ones((1, 1)), y=rng.normal(size=1), w1=np.ones(1), id=j
            )
            for j in range(10)
        ]
        design = GroupedDesign(blocks)
        with pytest.raises(DegenerateDesignError):
            fixed_point_variance(
                design, np.array([0.0]), VarianceComponents(1.0, 1.0), HUBER_MEDIAN
            )


class TestFitMqre:
    def test_unit_weight_design_equals_explicit_ones(self, clean_design):
        fit_a = fit_mqre(clean_design, HUBER_MEDIAN, compute_se=False)
        explicit = clean_design.with_weights(
            np.ones(clean_design.n), np.ones(clean_design.m)
        )
        fit_b = fit_mqre(explicit, HUBER_MEDIAN, compute_se=False)
        assert np.max(np.abs(fit_a.beta - fit_b.beta)) <= 1e-10
        assert abs(fit_a.varcomp.sigma2_gamma - fit_b.varcomp.sigma2_gamma) <= 1e-10
        assert abs(fit_a.varcomp.sigma2_eps - fit_b.varcomp.sigma2_eps) <= 1e-10

    def test_cluster_weight_scale_invariance(self, small_design):
        spec = InfluenceSpec(q=0.3)
        base = fit_mqre(small_design, spec, compute_se=False)
        scaled = small_design.with_weights(small_design.w1, 7.5 * small_design.w2)
        other = fit_mqre(scaled, spec, compute_se=False)
        np.testing.assert_allclose(other.beta, base.beta, atol=1e-8)
        np.testing.assert_allclose(
            other.varcomp.as_array(), base.varcomp.as_array(), atol=1e-8
        )

    @pytest.mark.parametrize("q", [0.25, 0.5])
    def test_mirror_property(self, q, small_design):
        # fitting -y at quantile q flips the sign of the fit at 1 - q
        spec = InfluenceSpec(q=q)
        negated = GroupedDesign(
            [
                ClusterBlock(X=blk.X, y=-blk.y, w1=blk.w1, w2=blk.w2, id=blk.id)
                for blk in small_design.clusters
            ]
        )
        a = fit_mqre(negated, spec, compute_se=False)
        b = fit_mqre(small_design, spec.mirrored(), compute_se=False)
        np.testing.assert_allclose(a.beta, -b.beta, atol=1e-6)
        np.testing.assert_allclose(
            a.varcomp.as_array(), b.varcomp.as_array(), atol=1e-6
        )

    def test_identity_matches_reference_ml_beta(self, clean_design):
        fit = fit_mqre(clean_design, IDENT_MEDIAN, compute_se=False)
        beta_ml, _, _ = weighted_gaussian_ml(clean_design, start=(1.0, 3.0))
        np.testing.assert_allclose(fit.beta, beta_ml, rtol=1e-4)

    def test_weighted_identity_matches_reference_pseudo_ml(self):
        rng = np.random.default_rng(23)
        design = make_clean_design(
            m=40,
            n_j=8,
            seed=23,
            w1=rng.uniform(0.5, 3.0, 320),
            w2=rng.uniform(0.5, 4.0, 40),
        )
        fit = fit_mqre(design, IDENT_MEDIAN, compute_se=False)
        beta_ml, s2g, s2e = weighted_gaussian_ml(design, start=(1.0, 3.0))
        np.testing.assert_allclose(fit.beta, beta_ml, rtol=1e-4)
        assert fit.varcomp.sigma2_gamma == pytest.approx(s2g, rel=1e-3, abs=1e-6)
        assert fit.varcomp.sigma2_eps == pytest.approx(s2e, rel=1e-3)

    def test_variance_components_estimable_at_every_quantile(self):
        # at q = 1/2 the quantile-specific components recover the model
        # variances; away from it they are method-defined quantities that
        # must stay positive, stable and converged
        design = make_clean_design(m=150, n_j=20, seed=31)
        for q in (0.1, 0.25, 0.5, 0.75, 0.9):
            fit = fit_mqre(design, InfluenceSpec(q=q), compute_se=False)
            assert fit.converged
            assert 0.2 <= fit.varcomp.sigma2_gamma <= 2.5
            assert 2.0 <= fit.varcomp.sigma2_eps <= 6.0
            if q == 0.5:
                assert fit.varcomp.sigma2_gamma == pytest.approx(1.0, abs=0.3)
                assert fit.varcomp.sigma2_eps == pytest.approx(3.3, abs=0.35)

    def test_rank_deficient_raises(self):
        blocks = [
            ClusterBlock(
                X=np.column_stack([np.ones(4), np.ones(4)]),
                y=np.arange(4.0),
                w1=np.ones(4),
                id=j,
            )
            for j in range(3)
        ]
        with pytest.raises(SingularDesignError):
            fit_mqre(GroupedDesign(blocks), HUBER_MEDIAN)

    def test_nonconvergence_reported_honestly(self, clean_design):
        fit = fit_mqre(clean_design, HUBER_MEDIAN, max_iter=2, compute_se=False)
        assert not fit.converged
        assert "no convergence" in fit.message
        assert fit.score_norm > 0.0

    def test_explicit_init_is_honoured(self, clean_design):
        fit = fit_mqre(clean_design, HUBER_MEDIAN, compute_se=False)
        warm = fit_mqre(
            clean_design,
            HUBER_MEDIAN,
            init=(fit.beta, fit.varcomp),
            compute_se=False,
        )
        assert warm.iterations <= 3
        np.testing.assert_allclose(warm.beta, fit.beta, atol=1e-6)
