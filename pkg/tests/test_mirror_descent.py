import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapmcdm.exceptions import ConfigError, DegenerateUpdateError, DomainError, InvalidStateError
from gapmcdm.likelihood import ApmGradient
from gapmcdm.mirror_descent import (
    StepSchedule,
    augmented_delta,
    exponentiated_gradient,
    step_size,
    update_apm,
    update_chol,
    update_chol_row,
    update_theta,
    update_weights,
)
from gapmcdm.model import ApmParams, ItemWeights, QMatrix


class TestStepSize:
    def test_values(self):
        assert step_size(1, 1.0) == 1.0
        # 100**-0.51, 30-digit mpmath evaluation
        assert step_size(100, 1.0, 0.01) == pytest.approx(0.0954992586021435910662730594798, rel=1e-14)
        for t in (1, 7, 1000):
            assert step_size(t, 2.0) == 2 * step_size(t, 1.0)

    def test_decreasing(self):
        g = [step_size(t, 1.0) for t in range(1, 200)]
        assert all(a > b for a, b in zip(g, g[1:]))

    def test_domain(self):
        with pytest.raises(DomainError):
            step_size(0, 1.0)

    def test_schedule_defaults(self):
        s = StepSchedule.default(1000)
        assert s.mu_alpha == s.mu_theta == s.mu_l == 1e-3
        m = StepSchedule.default(1000, "apm", misspecified=True)
        assert m.mu_delta == pytest.approx(3e-4) and m.mu_l == pytest.approx(3e-4)
        with pytest.raises(ConfigError):
            StepSchedule(mu_alpha=0.0)
        with pytest.raises(ConfigError):
            StepSchedule(epsilon=0.5)


class TestWeights:
    def test_fixed_points(self):
        a = ItemWeights(np.array([0.2, 0.8, 0.0]))
        q = np.array([1, 1, 0])
        np.testing.assert_allclose(update_weights(a, np.zeros(3), 1.0, q).alpha, a.alpha)
        np.testing.assert_allclose(update_weights(a, np.full(3, 4.2), 1.0, q).alpha, a.alpha, atol=1e-15)

    def test_closed_form(self):
        out = update_weights(ItemWeights(np.array([0.5, 0.5])), np.array([math.log(2), 0.0]), 1.0, [1, 1])
        np.testing.assert_allclose(out.alpha, [2 / 3, 1 / 3], rtol=1e-14)

    def test_no_admissible_mass(self):
        with pytest.raises(InvalidStateError):
            update_weights(np.array([0.0, 0.0, 1.0]), np.zeros(3), 1.0, [1, 1, 0])

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        q = rng.integers(0, 2, 4)
        q[0] = 1
        a = rng.dirichlet(np.ones(4)) * q
        a /= a.sum()
        g = rng.uniform(-10, 10, 4)
        np.testing.assert_allclose(update_weights(a, g, 0.3, q).alpha, update_weights(a, g + c, 0.3, q).alpha,
                                   atol=1e-12)


class TestTheta:
    def test_fixed_point_and_closed_form(self):
        th = np.array([0.25, 0.75])
        np.testing.assert_allclose(update_theta(th, np.zeros(2), 1.0), th)
        np.testing.assert_allclose(update_theta(th, np.array([math.log(3), 0.0]), 1.0), [0.5, 0.5], rtol=1e-14)

    def test_limit_is_monotone(self):
        th = np.full(4, 0.25)
        prev = th[0]
        for _ in range(50):
            th = update_theta(th, np.array([1.0, 0, 0, 0]), 0.5)
            assert th[0] > prev
            prev = th[0]
        assert th[0] > 0.999

    def test_underflowed_entries_never_strand_the_simplex(self):
        th = np.array([1.0, 0.0, 0.0])
        out = exponentiated_gradient(th, np.array([-1e300, 1e300, 1e300]), 1.0)
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0])

    def test_step_cap(self):
        th = np.array([0.5, 0.5])
        out = exponentiated_gradient(th, np.array([1e9, 0.0]), 1.0, max_step=2.0)
        np.testing.assert_allclose(out, np.exp([2.0, 0.0]) / np.exp([2.0, 0.0]).sum())

    def test_nan_gradient(self):
        with pytest.raises(InvalidStateError):
            update_theta(np.array([0.5, 0.5]), np.array([np.nan, 0.0]), 1.0)


class TestCholRow:
    def test_fixed_point(self):
        row = np.array([0.6, 0.8])
        np.testing.assert_allclose(update_chol_row(row, np.zeros(2), 0.1), row)

    def test_closed_form(self):
        np.testing.assert_allclose(update_chol_row(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0),
                                   [1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateUpdateError):
            update_chol_row(np.array([0.6, 0.8]), np.array([-0.6, -0.8]), 1.0)

    def test_diagonal_floor(self):
        out = update_chol_row(np.array([0.6, 0.8]), np.array([0.0, -0.8]), 1.0)
        assert out[-1] == 1e-6
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)

    def test_first_row_fixed(self):
        rng = np.random.default_rng(0)
        L = np.linalg.cholesky(np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]]))
        out = update_chol(L, np.tril(rng.normal(size=(3, 3))), 0.5)
        np.testing.assert_array_equal(out[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(np.diag(out @ out.T), 1.0, atol=1e-12)


def geometry_errors(n=10 ** 4, seed=123):
    """Worst simplex-sum and sphere-norm violations over ``n`` random updates.

    Sign and mask violations are asserted directly.
    """
    rng = np.random.default_rng(seed)
    worst_sum = worst_norm = 0.0
    for _ in range(n):
        K = int(rng.integers(1, 6))
        q = rng.integers(0, 2, K)
        q[rng.integers(K)] = 1
        a = rng.dirichlet(np.ones(K)) * q
        a /= a.sum()
        out = update_weights(a, rng.uniform(-10, 10, K), rng.uniform(0, 2), q).alpha
        assert np.all(out >= 0) and np.all(out[q == 0] == 0)
        worst_sum = max(worst_sum, abs(out.sum() - 1))
        S = int(rng.integers(2, 25))
        th = update_theta(rng.dirichlet(np.ones(S)), rng.uniform(-10, 10, S), rng.uniform(0, 2))
        assert np.all(th >= 0)
        worst_sum = max(worst_sum, abs(th.sum() - 1))
        k = int(rng.integers(2, 6))
        row = rng.normal(size=k)
        row /= np.linalg.norm(row)
        row[-1] = abs(row[-1])
        new = update_chol_row(row, rng.uniform(-10, 10, k), rng.uniform(0, 2))
        worst_norm = max(worst_norm, abs(np.linalg.norm(new) - 1))
    return worst_sum, worst_norm


def test_randomized_geometry_invariants():
    """10^4 random updates keep every simplex and sphere constraint within 1e-10."""
    worst_sum, worst_norm = geometry_errors()
    assert worst_sum <= 1e-10
    assert worst_norm <= 1e-10


def test_ascent_on_concave_toy():
    """Exponentiated gradient with the decaying schedule climbs sum(c log x)."""
    c = np.array([0.5, 0.3, 0.2])
    f = lambda x: float(np.sum(c * np.log(x)))  # noqa: E731
    x = np.array([0.8, 0.1, 0.1])
    vals = []
    for t in range(1, 1001):
        x = update_theta(x, c / x, step_size(t, 0.5))
        vals.append(f(x))
    assert all(b >= a - 1e-15 for a, b in zip(vals[10:], vals[11:]))
    np.testing.assert_allclose(x, c, atol=1e-3)


class TestApm:
    def setup_method(self):
        self.q = QMatrix(np.array([[1, 1, 0], [0, 1, 1]]))
        self.p = ApmParams(np.array([[0.1, 0.4, 0.4, 0.0], [0.2, 0.0, 0.3, 0.3]]), np.zeros(3), np.eye(3))

    def test_zero_gradient(self):
        g = ApmGradient(np.zeros((2, 4)), np.zeros(3), np.zeros((3, 3)))
        out = update_apm(self.p, g, 0.1, 0.1, self.q)
        np.testing.assert_allclose(out.delta, self.p.delta, atol=1e-15)
        np.testing.assert_array_equal(out.mean, self.p.mean)
        np.testing.assert_array_equal(out.cov_chol, self.p.cov_chol)

    def test_augmented_simplex(self):
        rng = np.random.default_rng(1)
        p = self.p
        for _ in range(200):
            g = ApmGradient(rng.uniform(-20, 20, (2, 4)), rng.normal(size=3), np.tril(rng.normal(size=(3, 3))))
            p = update_apm(p, g, 0.5, 0.05, self.q)
            aug = augmented_delta(p.delta, self.q)
            np.testing.assert_allclose(aug.sum(axis=1), 1.0, atol=1e-12)
            p.validate(self.q)
            assert np.all(np.diag(p.cov_chol) >= 1e-6)
