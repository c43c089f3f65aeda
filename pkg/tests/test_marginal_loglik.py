import math

import numpy as np
import pytest

from gapmcdm.exceptions import UnsupportedDimensionError
from gapmcdm.fit import PosteriorMoments, sample_posterior
from gapmcdm.marginal_loglik import is_loglik, log_mean_exp, quad_loglik
from gapmcdm.model import (
    ApmParams,
    Dataset,
    GapmParams,
    KnotGrid,
    QMatrix,
    apm_pi,
    gapm_pi,
    identity_theta,
)
from gapmcdm.simgen import make_equicorr, sample_copula

GRID = KnotGrid.from_interior([0.25, 0.5, 0.75])


def one_item(N):
    q = QMatrix(np.ones((1, 1), dtype=np.int8))
    params = GapmParams(np.ones((1, 1)), identity_theta(GRID, 1, 1), np.eye(1), GRID)
    return Dataset(np.ones((N, 1), dtype=np.int8)), params, q


def identity_instance(N, seed, sigma=0.7):
    rng = np.random.default_rng(seed)
    q = QMatrix(np.array([[1, 0], [0, 1], [1, 1]] * 3 + [[1, 1]], dtype=np.int8))
    alpha = rng.dirichlet([2.0, 2.0], q.J) * q.entries
    alpha /= alpha.sum(axis=1, keepdims=True)
    corr = make_equicorr(2, sigma)
    params = GapmParams(alpha, identity_theta(GRID, q.J, 2), np.linalg.cholesky(corr), GRID)
    U = sample_copula(N, corr, rng)
    Y = (rng.random((N, q.J)) < gapm_pi(params, q, U)).astype(np.int8)
    return Dataset(Y), params, q


def apm_instance(N, seed, sigma=0.5):
    rng = np.random.default_rng(seed)
    q = QMatrix(np.array([[1, 0], [0, 1], [1, 1]] * 3 + [[1, 1]], dtype=np.int8))
    guess = rng.uniform(0, 0.2, q.J)
    slip = rng.uniform(0, 0.2, q.J)
    slopes = rng.dirichlet([1.0, 1.0], q.J) * q.entries
    slopes *= ((1 - guess - slip) / slopes.sum(axis=1))[:, None]
    cov = make_equicorr(2, sigma)
    params = ApmParams(np.column_stack([guess, slopes]), np.array([0.2, -0.1]), np.linalg.cholesky(cov))
    U = sample_copula(N, cov, rng)
    Y = (rng.random((N, q.J)) < apm_pi(params, q, U)).astype(np.int8)
    return Dataset(Y), params, q


class TestQuadrature:
    def test_single_item(self):
        data, params, q = one_item(1)
        assert quad_loglik(data, params, q, 64) == pytest.approx(math.log(0.5), abs=1e-8)

    def test_no_items(self):
        q = QMatrix(np.zeros((0, 2), dtype=np.int8))
        params = GapmParams(np.zeros((0, 2)), np.zeros((0, 2, GRID.S)), np.eye(2), GRID)
        assert quad_loglik(Dataset(np.zeros((5, 0), dtype=np.int8)), params, q) == 0.0

    @pytest.mark.parametrize("make", [apm_instance, identity_instance])
    def test_node_doubling_converges(self, make):
        # 32 -> 64 still moves smooth K=2 instances by a few 1e-6; 64 -> 128 is settled
        data, params, q = make(50, 1, sigma=0.7)
        assert abs(quad_loglik(data, params, q, 64) - quad_loglik(data, params, q, 128)) < 1e-6
        assert abs(quad_loglik(data, params, q, 32) - quad_loglik(data, params, q, 64)) < 1e-4

    def test_dimension_guard(self):
        q = QMatrix(np.ones((1, 4), dtype=np.int8))
        params = GapmParams(np.full((1, 4), 0.25), identity_theta(GRID, 1, 4), np.eye(4), GRID)
        with pytest.raises(UnsupportedDimensionError):
            quad_loglik(Dataset(np.ones((2, 1), dtype=np.int8)), params, q)


class TestLogMeanExp:
    def test_extreme_range(self):
        log_w = np.linspace(-700, 700, 1001)
        est, se = log_mean_exp(log_w)
        expected = 700 + math.log(np.exp(log_w - 700).sum()) - math.log(log_w.size)
        assert np.isfinite(est) and np.isfinite(se)
        assert est == pytest.approx(expected, rel=1e-14)

    def test_constant_weights(self):
        est, se = log_mean_exp(np.full((2, 10), -3.0))
        np.testing.assert_allclose(est, -3.0)
        np.testing.assert_array_equal(se, 0.0)

    def test_too_few(self):
        with pytest.raises(ValueError):
            log_mean_exp(np.zeros(1))


class TestImportanceSampling:
    def test_single_item_limit(self):
        N = 40
        data, params, q = one_item(N)
        moments, _, _ = sample_posterior(data, params, q, 600, 200, seed=0)
        ll, se = is_loglik(data, params, q, moments, 2000, rng=1)
        assert abs(ll - N * math.log(0.5)) <= 3 * math.sqrt(np.sum(se ** 2))

    def test_no_items_returns_zero(self):
        q = QMatrix(np.zeros((0, 2), dtype=np.int8))
        params = GapmParams(np.zeros((0, 2)), np.zeros((0, 2, GRID.S)), np.eye(2), GRID)
        data = Dataset(np.zeros((20, 0), dtype=np.int8))
        # zero posterior covariance: the proposal N(0, I) is the prior, so every weight is 1
        ll, se = is_loglik(data, params, q, PosteriorMoments.empty(20, 2), 2000, rng=2)
        assert abs(ll) < 1e-10 and np.all(se < 1e-12)
        # inflated proposal: weights vary but still integrate to one
        wide = PosteriorMoments(np.zeros((20, 2)), np.repeat(np.eye(2)[None], 20, axis=0), 1)
        ll, se = is_loglik(data, params, q, wide, 2000, rng=3)
        assert np.all(se > 0)
        assert abs(ll) <= 3 * math.sqrt(np.sum(se ** 2))

    def test_too_few_draws(self):
        data, params, q = one_item(3)
        with pytest.raises(ValueError):
            is_loglik(data, params, q, PosteriorMoments.empty(3, 1), 1)

    def test_non_psd_moments_fall_back(self):
        data, params, q = one_item(2)
        moments = PosteriorMoments(np.zeros((2, 1)), np.array([[[-5.0]], [[0.0]]]), 1)
        with pytest.warns(RuntimeWarning, match="unit 0"):
            ll, _ = is_loglik(data, params, q, moments, 500, rng=0)
        assert np.isfinite(ll)

    @pytest.mark.parametrize("kind", ["gapm", "apm"])
    def test_agrees_with_quadrature(self, kind):
        data, params, q = identity_instance(50, 3) if kind == "gapm" else apm_instance(50, 3)
        moments, _, _ = sample_posterior(data, params, q, 1000, 300, seed=4)
        ll, se = is_loglik(data, params, q, moments, 2000, rng=5)
        exact = quad_loglik(data, params, q, 64)
        assert abs(ll - exact) <= max(3 * math.sqrt(np.sum(se ** 2)), 1e-3 * abs(exact))

    def test_two_proposals_agree(self):
        data, params, q = identity_instance(50, 6)
        posterior, _, _ = sample_posterior(data, params, q, 1000, 300, seed=6)
        prior_like = PosteriorMoments(np.zeros((50, 2)), np.repeat(params.sigma[None], 50, axis=0), 1)
        a, sa = is_loglik(data, params, q, posterior, 2000, rng=7)
        b, sb = is_loglik(data, params, q, prior_like, 2000, rng=8)
        assert abs(a - b) <= 3 * math.sqrt(np.sum(sa ** 2) + np.sum(sb ** 2))

    def test_reproducible(self):
        data, params, q = identity_instance(20, 9)
        m = PosteriorMoments(np.zeros((20, 2)), np.zeros((20, 2, 2)), 1)
        assert is_loglik(data, params, q, m, 300, rng=1)[0] == is_loglik(data, params, q, m, 300, rng=1)[0]


@pytest.mark.slow
def test_truth_beats_heavy_perturbation():
    """ll(true) >= ll(perturbed) in at least 95 of 100 simulated trials (m=4000)."""
    wins = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        q = QMatrix(np.array([[1, 0], [0, 1], [1, 1]] * 3 + [[1, 1]], dtype=np.int8))
        theta = rng.dirichlet(np.full(GRID.S, 5.0), (q.J, 2))
        alpha = q.entries / q.entries.sum(axis=1, keepdims=True)
        truth = GapmParams(alpha, theta, np.linalg.cholesky(make_equicorr(2, 0.5)), GRID)
        U = sample_copula(50, make_equicorr(2, 0.5), rng)
        data = Dataset((rng.random((50, q.J)) < gapm_pi(truth, q, U)).astype(np.int8))
        front = np.zeros(GRID.S)
        front[0] = 1.0
        wrong = truth.replace(theta=np.broadcast_to(front, theta.shape).copy(), chol=np.eye(2))
        moments = PosteriorMoments(np.zeros((50, 2)), np.repeat(truth.sigma[None], 50, axis=0), 1)
        a, _ = is_loglik(data, truth, q, moments, 4000, rng=trial)
        b, _ = is_loglik(data, wrong, q, moments, 4000, rng=trial)
        wins += a >= b
    assert wins >= 95
