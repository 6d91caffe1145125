import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpnet import features, scores
from dpnet.linalg import NotPSDError

from helpers import fd_matrix_gradient, rel_err


def triple(cx, cxp, cxy, m=2):
    return scores.CovarianceTriple(
        cov_x=np.asarray(cx, float),
        cov_xp=np.asarray(cxp, float),
        cov_cross=np.asarray(cxy, float),
        m=m,
    )


class TestEstimateCovariances:
    def test_orthonormal_columns(self):
        psi = np.array([[1.0, 0.0], [0.0, 1.0]])
        cov = scores.estimate_covariances(psi, psi)
        assert np.allclose(cov.cov_x, np.eye(2) / 2)
        assert np.allclose(cov.cov_xp, np.eye(2) / 2)
        assert np.allclose(cov.cov_cross, np.eye(2) / 2)

    def test_single_column(self):
        psi = np.array([[1.0], [1.0]])
        cov = scores.estimate_covariances(psi, psi)
        assert np.allclose(cov.cov_x, np.ones((2, 2)))

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        psi = rng.standard_normal((3, 100))
        psi_p = rng.standard_normal((3, 100))
        cov = scores.estimate_covariances(psi, psi_p)
        direct = sum(np.outer(psi[:, i], psi_p[:, i]) for i in range(100)) / 100
        assert np.allclose(cov.cov_cross, direct, atol=1e-12)
        cov.validate()

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            scores.estimate_covariances(np.ones((2, 0)), np.ones((2, 0)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            scores.estimate_covariances(np.ones((2, 4)), np.ones((2, 5)))


class TestMetricDistortion:
    def test_identity_is_zero(self):
        assert scores.metric_distortion(np.eye(3)) == pytest.approx(0.0, abs=1e-14)

    def test_diag_2_1(self):
        expected = 2.0 - np.log(2.0)
        assert scores.metric_distortion(np.diag([2.0, 1.0])) == pytest.approx(expected)

    def test_positive_off_identity(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        lam = rng.uniform(0.5, 2.0, 4)
        c = (q * lam) @ q.T
        val = scores.metric_distortion(c)
        assert val > 0.0
        # scalar-calculus oracle: per-eigenvalue term minimized at 1
        per = lam**2 - lam - np.log(lam)
        assert val == pytest.approx(per.sum(), rel=1e-10)

    def test_clamp_keeps_finite(self):
        assert np.isfinite(scores.metric_distortion(np.diag([1.0, 0.0])))

    def test_rejects_non_psd(self):
        with pytest.raises(NotPSDError):
            scores.metric_distortion(np.diag([1.0, -0.5]))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(1e-6, 50.0, allow_nan=False), min_size=1, max_size=6)
)
def test_distortion_nonnegative_zero_iff_one(lams):
    lam = np.array(lams)
    val = scores.metric_distortion_eigvals(lam)
    assert val >= -1e-12
    if np.all(np.abs(lam - 1.0) < 1e-12):
        assert val == pytest.approx(0.0, abs=1e-10)
    elif np.any(np.abs(lam - 1.0) > 1e-4):
        assert val > 0.0


class TestScoreP:
    def test_identity_whitening(self):
        v = scores.score_P(triple(np.eye(2), np.eye(2), np.diag([0.9, 0.5])), 0.0)
        assert v.total == pytest.approx(1.06)
        assert v.correlation == pytest.approx(1.06)

    def test_whitening_scales(self):
        v = scores.score_P(triple(np.diag([2.0, 1.0]), np.eye(2), np.diag([1.0, 0.5])), 0.0)
        assert v.total == pytest.approx(0.75)

    def test_gamma_splits_terms(self):
        cov = triple(np.diag([2.0, 1.0]), np.eye(2), np.diag([1.0, 0.5]))
        v = scores.score_P(cov, gamma=0.5)
        assert v.total == pytest.approx(v.correlation - 0.5 * v.distortion_penalty)
        assert v.distortion_x == pytest.approx(2.0 - np.log(2.0))
        assert v.distortion_xp == pytest.approx(0.0, abs=1e-14)

    def test_conditioning_diagnostic(self):
        v = scores.score_P(triple(np.diag([4.0, 1.0]), np.eye(2), np.eye(2)), 0.0)
        assert v.cond_x == pytest.approx(4.0)
        assert v.cond_xp == pytest.approx(1.0)


class TestScoreS:
    def test_examples(self):
        v = scores.score_S(triple(np.diag([2.0, 1.0]), np.eye(2), np.diag([1.0, 0.5])), 0.0)
        assert v.total == pytest.approx(0.625)
        v2 = scores.score_S(triple(np.eye(2), np.eye(2), np.eye(2)), 0.0)
        assert v2.total == pytest.approx(2.0)

    def test_relaxed_below_projection(self):
        cov = triple(np.diag([2.0, 1.0]), np.eye(2), np.diag([1.0, 0.5]))
        assert scores.score_S(cov, 0.0).total <= scores.score_P(cov, 0.0).total

    def test_zero_covariance_degenerate(self):
        with pytest.raises(scores.DegenerateBatchError):
            scores.score_S(triple(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2))), 0.0)

    def test_whitened_scores_coincide(self):
        # orthonormal features under the empirical inner product
        rng = np.random.default_rng(3)
        m = 40
        q, _ = np.linalg.qr(rng.standard_normal((m, 3)))
        psi = q.T * np.sqrt(m)
        q2, _ = np.linalg.qr(rng.standard_normal((m, 3)))
        psi_p = q2.T * np.sqrt(m)
        cov = scores.estimate_covariances(psi, psi_p)
        p = scores.score_P(cov, 1.0)
        s = scores.score_S(cov, 1.0)
        assert p.total == pytest.approx(s.total, abs=1e-10)
        assert p.distortion_penalty == pytest.approx(0.0, abs=1e-10)


class TestScoreRidge:
    def test_identity_example(self):
        v = scores.score_ridge(triple(np.eye(2), np.eye(2), np.eye(2)), lam_reg=1.0)
        assert v.total == pytest.approx(0.5)

    def test_small_lambda_approaches_projection(self):
        rng = np.random.default_rng(4)
        psi = rng.standard_normal((3, 50))
        psi_p = rng.standard_normal((3, 50))
        cov = scores.estimate_covariances(psi, psi_p)
        p = scores.score_P(cov, 0.0).correlation
        r = scores.score_ridge(cov, lam_reg=1e-12).correlation
        assert r == pytest.approx(p, rel=1e-6)

    def test_monotone_in_lambda(self):
        rng = np.random.default_rng(5)
        psi = rng.standard_normal((3, 60))
        psi_p = rng.standard_normal((3, 60))
        cov = scores.estimate_covariances(psi, psi_p)
        grid = np.logspace(-6, 1, 20)
        vals = [scores.score_ridge(cov, lam_reg=l).correlation for l in grid]
        assert np.all(np.diff(vals) <= 1e-12)

    def test_rejects_nonpositive_lambda(self):
        with pytest.raises(ValueError):
            scores.score_ridge(triple(np.eye(2), np.eye(2), np.eye(2)), lam_reg=0.0)


class TestScoreGenerator:
    def test_trivial(self):
        gc = scores.GeneratorCovariances(np.eye(2), np.diag([-0.1, -0.5]), m=2)
        assert scores.score_generator(gc).total == pytest.approx(-0.6)

    def test_identity_covariance_no_penalty(self):
        gc = scores.GeneratorCovariances(np.eye(3), np.diag([-1.0, -2.0, -3.0]), m=3)
        v = scores.score_generator(gc, gamma=2.0)
        assert v.distortion_x == pytest.approx(0.0, abs=1e-14)
        assert v.total == pytest.approx(-6.0)

    def test_exact_eigenfunctions_reach_bound(self, ou_oracle):
        r = 4
        phi = ou_oracle.eigenfunction_features(r)
        gc = ou_oracle.generator_covariances(phi)
        v = scores.score_generator(gc, 0.0)
        assert v.total == pytest.approx(np.sum(ou_oracle.eigenvalues[:r]), abs=1e-9)

    def test_asymmetry_diagnostic(self):
        gc = scores.GeneratorCovariances(np.eye(2), np.array([[0.0, 1.0], [-1.0, 0.0]]), m=2)
        assert gc.asymmetry > 0.5


class TestGradients:
    """Analytic gradients against central finite differences."""

    @pytest.mark.parametrize("seed", range(5))
    def test_score_P(self, seed):
        rng = np.random.default_rng(seed)
        psi = rng.standard_normal((3, 15))
        psi_p = rng.standard_normal((3, 15))
        v, gp, gpp = scores.score_P_grad(psi, psi_p, gamma=1.0)

        def f_p(a):
            return scores.score_P(scores.estimate_covariances(a, psi_p), 1.0).total

        def f_pp(b):
            return scores.score_P(scores.estimate_covariances(psi, b), 1.0).total

        assert rel_err(gp, fd_matrix_gradient(f_p, psi)) < 1e-4
        assert rel_err(gpp, fd_matrix_gradient(f_pp, psi_p)) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_score_S(self, seed):
        rng = np.random.default_rng(10 + seed)
        psi = rng.standard_normal((3, 15))
        psi_p = rng.standard_normal((3, 15))
        v, gp, gpp = scores.score_S_grad(psi, psi_p, gamma=0.3)

        def f_p(a):
            return scores.score_S(scores.estimate_covariances(a, psi_p), 0.3).total

        def f_pp(b):
            return scores.score_S(scores.estimate_covariances(psi, b), 0.3).total

        assert rel_err(gp, fd_matrix_gradient(f_p, psi)) < 1e-4
        assert rel_err(gpp, fd_matrix_gradient(f_pp, psi_p)) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_score_ridge(self, seed):
        rng = np.random.default_rng(20 + seed)
        psi = rng.standard_normal((3, 12))
        psi_p = rng.standard_normal((3, 12))
        v, gp, gpp = scores.score_ridge_grad(psi, psi_p, lam_reg=0.05, gamma=0.3)

        def f_p(a):
            return scores.score_ridge(scores.estimate_covariances(a, psi_p), 0.05, 0.3).total

        assert rel_err(gp, fd_matrix_gradient(f_p, psi)) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_score_generator(self, seed):
        rng = np.random.default_rng(30 + seed)
        psi = rng.standard_normal((3, 12))
        dpsi = rng.standard_normal((3, 12))
        v, gp, gd = scores.score_generator_grad(psi, dpsi, gamma=0.5)

        def f_p(a):
            return scores.score_generator(scores.generator_covariances(a, dpsi), 0.5).total

        def f_d(b):
            return scores.score_generator(scores.generator_covariances(psi, b), 0.5).total

        assert rel_err(gp, fd_matrix_gradient(f_p, psi)) < 1e-4
        assert rel_err(gd, fd_matrix_gradient(f_d, dpsi)) < 1e-4


class _QuadraticFeature:
    """Stub feature map psi(x) = x^2 with exact spatial derivatives."""

    input_dim = 1
    output_dim = 1

    def _coerce_batch(self, states):
        x = np.asarray(states, dtype=np.float64)
        return x[:, None] if x.ndim == 1 else x

    def forward_spatial(self, states):
        x = self._coerce_batch(states)[:, 0]
        psi = (x**2)[None, :]
        grad = (2 * x)[None, :, None]
        hess = np.full((1, x.size, 1, 1), 2.0)
        return psi, grad, hess, None


class TestIto:
    def test_quadratic_closed_form(self):
        # psi = x^2, drift -x, diffusion sqrt(2): dpsi = -2x^2 + 2
        fm = _QuadraticFeature()
        x = np.array([0.0, 0.5, -1.2])
        _, dpsi, _, _, _ = scores.ito_features(fm, x, lambda s: -s, np.sqrt(2.0))
        assert np.allclose(dpsi[0], -2 * x**2 + 2)

    def test_linear_feature(self):
        spec = features.FeatureMapSpec(1, (1,), ("identity",))
        fm = features.FeatureMap(spec, np.array([1.0, 0.0]))
        out = scores.ito_dpsi(fm, 0.7, lambda s: np.full_like(s, 1.5), 2.0)
        assert out[0] == pytest.approx(1.5)

    def test_monte_carlo_oracle(self):
        # one Euler-Maruyama step from a point vs the analytic generator
        spec = features.FeatureMapSpec(1, (8, 3), ("celu", "identity"), seed=42)
        fm = features.FeatureMap.init(spec)
        x0, delta, nsamp = 0.3, 1e-3, 100_000
        drift = lambda s: s - s**3
        b = 0.8
        rng = np.random.default_rng(7)
        x1 = x0 + drift(np.array([x0]))[0] * delta + b * np.sqrt(delta) * rng.standard_normal(nsamp)
        psi0, _ = fm.forward(np.array([x0]))
        psi1, _ = fm.forward(x1)
        mc = (psi1.mean(axis=1) - psi0[:, 0]) / delta
        se = psi1.std(axis=1) / np.sqrt(nsamp) / delta
        analytic = scores.ito_dpsi(fm, x0, drift, b)
        assert np.all(np.abs(mc - analytic) < 5 * se + 1e-2)

    def test_nonsmooth_rejected(self):
        spec = features.FeatureMapSpec(1, (4, 2), ("leaky_relu", "identity"), seed=0)
        fm = features.FeatureMap.init(spec)
        with pytest.raises(features.UnsupportedActivationError):
            scores.ito_dpsi(fm, 0.1, lambda s: -s, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.1, 1.0]))
def test_relaxed_below_projection_property(seed, gamma):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(2, 5))
    m = int(rng.integers(r + 1, 30))
    psi = rng.standard_normal((r, m))
    psi_p = rng.standard_normal((r, m))
    cov = scores.estimate_covariances(psi, psi_p)
    s = scores.score_S(cov, gamma).total
    p = scores.score_P(cov, gamma).total
    assert s <= p + 1e-10


def test_csv_row_matches_header():
    v = scores.score_P(triple(np.eye(2), np.eye(2), np.eye(2)), 0.5)
    row = scores.csv_row(v)
    assert len(row) == len(scores.CSV_HEADER)
    assert row[0] == v.total
