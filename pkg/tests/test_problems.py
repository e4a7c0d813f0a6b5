import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradient_toy
from localbatch.errors import ConfigError, InputError
from localbatch.problems import (
    LogisticProblem,
    ProblemConfig,
    QuadraticProblem,
    linearly_separable,
    make_logistic,
    make_quadratic,
)


@pytest.fixture(scope="module")
def quad():
    return make_quadratic(1000, 10, 0.1, 1.0, seed=0)


@pytest.fixture(scope="module")
def logit():
    return make_logistic(400, 5, separation=1.0, seed=3)


def central_difference(f, x, h):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestPerSampleGradient:
    def test_least_squares_hand_value(self):
        p = QuadraticProblem(np.eye(2), np.zeros(2))
        npt.assert_array_equal(p.per_sample_gradient([2.0, 0.0], 0), [2.0, 0.0])

    def test_interpolating_problem_vanishes_at_minimizer(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((20, 3))
        x_star = rng.standard_normal(3)
        p = QuadraticProblem(A, A @ x_star)
        npt.assert_allclose(p.per_sample_gradients(x_star), 0.0, atol=1e-13)

    def test_logistic_hand_value(self):
        p = LogisticProblem(np.eye(2), np.ones(2), solve=False)
        npt.assert_array_equal(p.per_sample_gradient([0.0, 0.0], 0), [-0.5, 0.0])

    @pytest.mark.parametrize("i", [-1, 3, 10])
    def test_index_out_of_range(self, toy036, i):
        with pytest.raises(InputError):
            toy036.per_sample_gradient([0.0], i)

    def test_non_finite_point_rejected(self, toy036):
        with pytest.raises(InputError):
            toy036.full_gradient([np.nan])

    def test_wrong_dimension_rejected(self, quad):
        with pytest.raises(InputError):
            quad.full_gradient(np.zeros(3))


class TestFullAndBatchGradient:
    def test_identity_hessian_zero_bias(self):
        A = np.sqrt(2.0) * np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        p = QuadraticProblem(A, np.zeros(4))
        npt.assert_allclose(p.hessian, np.eye(2), atol=1e-15)
        npt.assert_allclose(p.full_gradient([3.0, -1.0]), [3.0, -1.0], rtol=1e-15)

    def test_toy_full_gradient(self, toy036):
        npt.assert_array_equal(toy036.full_gradient([0.0]), [3.0])

    def test_single_sample_matches_per_sample(self):
        p = QuadraticProblem([[2.0, 1.0]], [1.0])
        x = np.array([0.3, -0.7])
        npt.assert_array_equal(p.full_gradient(x), p.per_sample_gradient(x, 0))

    def test_toy_batch_of_first_and_last(self, toy036):
        npt.assert_array_equal(toy036.batch_gradient([0.0], [0, 2]), [3.0])

    def test_duplicate_batch_is_that_sample(self, toy036):
        npt.assert_array_equal(toy036.batch_gradient([0.0], [1, 1]), [3.0])

    def test_empty_batch_rejected(self, toy036):
        with pytest.raises(InputError):
            toy036.batch_gradient([0.0], [])

    def test_batch_order_does_not_matter(self, quad):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(10)
        batch = rng.choice(1000, 50, replace=False)
        npt.assert_array_equal(quad.batch_gradient(x, batch), quad.batch_gradient(x, batch[::-1]))

    def test_full_index_set_matches_full_gradient(self, quad, logit):
        rng = np.random.default_rng(3)
        for p in (quad, logit):
            for _ in range(500):
                x = rng.standard_normal(p.d)
                g = p.full_gradient(x)
                npt.assert_allclose(p.batch_gradient(x, rng.permutation(p.n)), g, rtol=1e-12, atol=1e-15)


class TestGradientCorrectness:
    def test_quadratic_finite_differences(self, quad):
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = rng.standard_normal(10) * 3
            fd = central_difference(quad.loss, x, 1e-5)
            g = quad.full_gradient(x)
            assert np.linalg.norm(fd - g) <= 1e-6 * max(np.linalg.norm(g), 1e-8)

    def test_logistic_finite_differences(self, logit):
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.standard_normal(5)
            fd = central_difference(logit.loss, x, 1e-5)
            g = logit.full_gradient(x)
            assert np.linalg.norm(fd - g) <= 1e-5 * max(np.linalg.norm(g), 1e-8)


class TestMakeQuadratic:
    def test_isotropic_case(self):
        p = make_quadratic(4, 2, 1.0, 1.0, seed=7)
        npt.assert_allclose(p.hessian, np.eye(2), atol=1e-14)
        x = np.array([0.5, -2.0])
        npt.assert_allclose(p.full_gradient(x), x - p.x_star, atol=1e-13)

    def test_spectrum_extremes(self, quad):
        eig = np.linalg.eigvalsh(quad.features.T @ quad.features / quad.n)
        npt.assert_allclose([eig[0], eig[-1]], [0.1, 1.0], atol=1e-10)
        assert (quad.mu, quad.L) == (0.1, 1.0)

    def test_minimizer_solves_normal_equations(self, quad):
        residual = quad.features.T @ (quad.features @ quad.x_star - quad.targets) / quad.n
        assert np.linalg.norm(residual) < 1e-12

    def test_minimizer_beats_random_points(self, quad):
        rng = np.random.default_rng(6)
        for _ in range(100):
            x = quad.x_star + rng.standard_normal(10) * rng.uniform(1e-3, 10)
            assert quad.loss(x) >= quad.f_star
            assert quad.suboptimality(x) >= 0

    def test_smoothness_and_strong_convexity(self, quad):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            x, y = rng.standard_normal((2, 10)) * 5
            gx, gy = quad.full_gradient(x), quad.full_gradient(y)
            diff = x - y
            assert np.linalg.norm(gx - gy) <= quad.L * np.linalg.norm(diff) * (1 + 1e-12)
            lhs = quad.loss(x) - quad.loss(y) + 0.5 * quad.mu * diff @ diff
            assert lhs <= gx @ diff + 1e-9 * (1 + abs(gx @ diff))

    def test_same_seed_bit_identical(self):
        a, b = make_quadratic(50, 4, 0.2, 2.0, seed=11), make_quadratic(50, 4, 0.2, 2.0, seed=11)
        npt.assert_array_equal(a.features, b.features)
        npt.assert_array_equal(a.targets, b.targets)
        npt.assert_array_equal(a.x_star, b.x_star)

    def test_noiseless_problem_interpolates(self):
        p = make_quadratic(30, 3, 0.5, 1.5, seed=1, noise=0.0)
        npt.assert_allclose(p.per_sample_gradients(p.x_star), 0.0, atol=1e-12)

    @pytest.mark.parametrize("n, d, mu, L", [(10, 2, 2.0, 1.0), (3, 5, 0.1, 1.0), (10, 2, 0.0, 1.0)])
    def test_invalid_arguments(self, n, d, mu, L):
        with pytest.raises(ConfigError):
            make_quadratic(n, d, mu, L)

    def test_data_is_read_only(self, quad):
        with pytest.raises(ValueError):
            quad.features[0, 0] = 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.floats(0.01, 1.0), st.floats(1.0, 10.0), st.integers(0, 1000))
    def test_spectrum_property(self, d, mu, L, seed):
        p = make_quadratic(3 * d, d, mu, L, seed=seed)
        eig = np.linalg.eigvalsh(p.features.T @ p.features / p.n)
        npt.assert_allclose([eig[0], eig[-1]], [mu, L], rtol=1e-10)


class TestMakeLogistic:
    def test_all_positive_labels_gradient_at_zero(self):
        rng = np.random.default_rng(9)
        A = rng.standard_normal((8, 3))
        p = LogisticProblem(A, np.ones(8), solve=False)
        npt.assert_allclose(p.full_gradient(np.zeros(3)), -A.sum(axis=0) / 16, rtol=1e-15)

    def test_zero_separation_loss_at_origin(self):
        p = make_logistic(100, 4, separation=0.0, seed=0)
        assert p.loss(np.zeros(4)) == pytest.approx(np.log(2.0), rel=1e-15)
        assert abs(np.sum(p.targets)) == 0

    def test_same_seed_bit_identical(self):
        a, b = make_logistic(60, 3, 2.0, seed=5), make_logistic(60, 3, 2.0, seed=5)
        npt.assert_array_equal(a.features, b.features)
        npt.assert_array_equal(a.targets, b.targets)

    def test_smoothness_bound_stored(self, logit):
        assert logit.L == pytest.approx(np.max(np.sum(logit.features**2, axis=1)) / 4)

    def test_overlapping_classes_have_minimizer(self, logit):
        assert logit.x_star is not None
        assert np.linalg.norm(logit.full_gradient(logit.x_star)) < 1e-10

    def test_separable_data_has_zero_infimum(self):
        p = make_logistic(200, 4, separation=8.0, seed=0)
        assert linearly_separable(p.features, p.targets)
        assert p.x_star is None and p.f_star == 0.0

    def test_labels_must_be_signs(self):
        with pytest.raises(InputError):
            LogisticProblem(np.eye(2), [1.0, 0.0])


class TestProblemConfig:
    def test_builds_each_kind(self):
        assert ProblemConfig("quadratic", n=20, d=2).build().kind == "quadratic"
        assert ProblemConfig("logistic", n=20, d=2).build().kind == "logistic"

    def test_collects_all_errors(self):
        errors = ProblemConfig("quadratic", n=2, d=5, mu=2.0, L=1.0, seed=-1).validate()
        keys = {e[0] for e in errors}
        assert {"problem.mu", "problem.n", "problem.seed"} <= keys

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ProblemConfig("cubic").build()


def test_gradient_toy_helper_values():
    npt.assert_array_equal(gradient_toy([1.0, -2.0]).per_sample_gradients([0.0])[:, 0], [1.0, -2.0])
