"""Problem families: generation, exact objectives, and the variance oracle."""

import itertools

import numpy as np
import pytest
from scipy import optimize

from doublysgd.problems import (
    analytic_variance_oracle,
    component_gradients,
    component_value_and_gradient,
    global_optimum,
    load_problem,
    make_quadratic_problem,
    make_reparam_problem,
    make_smoothing_erm_problem,
    minibatch_exact_gradient,
    objective_and_gradient,
    pack_location_scale,
    problem_from_dict,
    problem_to_dict,
    quadratic_problem_from_parts,
    reparam_initial_point,
    save_problem,
    unpack_location_scale,
)


def exhaustive_subset_variance(p, x, b, m, sharing, strategy):
    """Law-of-total-variance oracle by direct batch enumeration.

    Conditional on the batch only the Gaussian block average matters; its
    variance has the two-line closed form used below.  Everything else is
    an explicit average over every possible batch.
    """
    L = p.components.smoothness
    a = L[:, None] * (x[None, :] - p.components.centers)
    if strategy == "without_replacement":
        batches = [list(c) for c in itertools.combinations(range(p.n), b)]
    else:
        batches = [list(c) for c in itertools.product(range(p.n), repeat=b)]
    cond_means = np.stack([a[batch].mean(axis=0) for batch in batches])
    cond_vars = []
    for batch in batches:
        if sharing == "shared":
            cond_vars.append((p.d / m) * L[batch].mean() ** 2)
        else:
            cond_vars.append((p.d / m) * np.sum(L[batch] ** 2) / b ** 2)
    ensemble = np.mean(cond_vars)
    center = cond_means.mean(axis=0)
    subsample = np.mean(np.sum((cond_means - center) ** 2, axis=1))
    return ensemble + subsample


class TestQuadraticGeneration:
    def test_deterministic_under_seed(self):
        p1 = make_quadratic_problem(32, 4, 2.0, seed=123)
        p2 = make_quadratic_problem(32, 4, 2.0, seed=123)
        np.testing.assert_array_equal(p1.components.smoothness, p2.components.smoothness)
        np.testing.assert_array_equal(p1.components.centers, p2.components.centers)

    def test_smoothness_positive_and_reciprocal_chi_square(self):
        # 1/L is chi-square with one degree of freedom: mean 1, variance 2
        p = make_quadratic_problem(20000, 2, 1.0, seed=5)
        inv = 1.0 / p.components.smoothness
        assert np.all(p.components.smoothness > 0)
        se = np.sqrt(2.0 / p.n)
        assert abs(np.mean(inv) - 1.0) < 3 * se

    def test_center_covariance_matches_heterogeneity(self):
        # coordinate variance of the centers is s^2 = 4, measured over many seeds
        entries = []
        for seed in range(10000):
            p = make_quadratic_problem(4, 2, 2.0, seed=seed)
            entries.append(p.components.centers.ravel())
        entries = np.concatenate(entries)
        # Var(Z^2) = 2 s^4 for centered Gaussians
        se = np.sqrt(2 * 16.0 / entries.size)
        assert abs(np.mean(entries ** 2) - 4.0) < 3 * se

    def test_degenerate_heterogeneity_shrinks_centers(self):
        p = make_quadratic_problem(1, 1, 1e-12, seed=0)
        assert abs(p.components.centers[0, 0]) < 1e-9

    def test_invalid_dimensions_rejected(self):
        with pytest.raises(ValueError):
            make_quadratic_problem(0, 3, 1.0, seed=0)
        with pytest.raises(ValueError):
            make_quadratic_problem(3, 0, 1.0, seed=0)
        with pytest.raises(ValueError):
            make_quadratic_problem(3, 3, 0.0, seed=0)


class TestGlobalOptimum:
    def test_single_component(self):
        p = quadratic_problem_from_parts([2.0], [[1.0, -3.0]])
        np.testing.assert_allclose(global_optimum(p), [1.0, -3.0])

    def test_equal_smoothness_gives_mean_center(self):
        centers = np.array([[0.0, 0.0], [2.0, 4.0]])
        p = quadratic_problem_from_parts([1.5, 1.5], centers)
        np.testing.assert_allclose(global_optimum(p), [1.0, 2.0])

    def test_weighted_basis_centers(self):
        p = quadratic_problem_from_parts([1.0, 2.0, 3.0], np.eye(3))
        np.testing.assert_allclose(global_optimum(p), [1 / 6, 2 / 6, 3 / 6])

    def test_against_numerical_minimizer(self):
        p = make_quadratic_problem(12, 4, 2.0, seed=9)
        res = optimize.minimize(lambda x: objective_and_gradient(p, x)[0],
                                np.zeros(4), jac=lambda x: objective_and_gradient(p, x)[1],
                                method="BFGS", tol=1e-14)
        np.testing.assert_allclose(global_optimum(p), res.x, atol=1e-7)

    def test_stationarity(self):
        for seed in (0, 1, 2):
            p = make_quadratic_problem(64, 6, 3.0, seed=seed)
            xs = global_optimum(p)
            _, g = objective_and_gradient(p, xs)
            assert np.linalg.norm(g) <= 1e-10 * (1 + np.linalg.norm(xs))

    def test_unsupported_kind(self):
        p = make_smoothing_erm_problem(4, 2, 0.5, seed=0)
        with pytest.raises(ValueError):
            global_optimum(p)


def _random_point(p, rng):
    if p.kind == "reparam":
        # keep the scale diagonal away from zero but exercise generic entries
        return reparam_initial_point(p) + 0.3 * rng.standard_normal(p.d)
    return rng.standard_normal(p.d)


class TestObjectiveAndGradient:
    @pytest.fixture(params=["quadratic", "smoothing_erm", "reparam"])
    def problem(self, request):
        if request.param == "quadratic":
            return make_quadratic_problem(10, 4, 1.5, seed=21)
        if request.param == "smoothing_erm":
            return make_smoothing_erm_problem(10, 4, 0.7, seed=22)
        return make_reparam_problem(6, 3, seed=23)

    def test_gradient_matches_central_differences(self, problem):
        rng = np.random.default_rng(100)
        h = 1e-5
        for _ in range(20):
            x = _random_point(problem, rng)
            _, grad = objective_and_gradient(problem, x)
            fd = np.empty_like(x)
            for j in range(problem.d):
                e = np.zeros(problem.d)
                e[j] = h
                fp, _ = objective_and_gradient(problem, x + e)
                fm, _ = objective_and_gradient(problem, x - e)
                fd[j] = (fp - fm) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_component_gradients_average_to_full(self, problem):
        rng = np.random.default_rng(7)
        x = _random_point(problem, rng)
        _, grad = objective_and_gradient(problem, x)
        per = component_gradients(problem, x)
        np.testing.assert_allclose(per.mean(axis=0), grad, rtol=1e-12, atol=1e-12)
        v0, g0 = component_value_and_gradient(problem, 0, x)
        np.testing.assert_allclose(g0, per[0], rtol=1e-12, atol=1e-12)
        batch = np.array([0, 2, 3])
        np.testing.assert_allclose(minibatch_exact_gradient(problem, batch, x),
                                   per[batch].mean(axis=0), rtol=1e-12, atol=1e-12)

    def test_quadratic_gradient_vanishes_at_optimum(self):
        p = make_quadratic_problem(16, 3, 1.0, seed=3)
        _, g = objective_and_gradient(p, global_optimum(p))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_quadratic_two_component_value(self):
        # L = (1, 1), centers +-1, x = 0, d = 1: each component is
        # (1/2)(1 + 1) = 1, so F = 1 including the noise-floor constant
        p = quadratic_problem_from_parts([1.0, 1.0], [[1.0], [-1.0]])
        value, _ = objective_and_gradient(p, np.zeros(1))
        assert value == pytest.approx(1.0, abs=1e-14)

    def test_reparam_value_at_target(self):
        p = make_reparam_problem(1, 3, seed=11)
        w = pack_location_scale(p.components.targets[0], np.eye(3))
        value, grad = objective_and_gradient(p, w)
        L = p.components.smoothness[0]
        assert value == pytest.approx(0.5 * L * 3, rel=1e-14)
        np.testing.assert_allclose(grad[:3], 0.0, atol=1e-14)

    def test_rejects_bad_points(self):
        p = make_quadratic_problem(4, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            objective_and_gradient(p, np.array([np.nan, 0.0]))
        with pytest.raises(ValueError):
            objective_and_gradient(p, np.zeros(3))


class TestLocationScalePacking:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal(4)
        scale = np.tril(rng.standard_normal((4, 4)))
        np.fill_diagonal(scale, np.abs(np.diag(scale)) + 0.1)
        w = pack_location_scale(m, scale)
        m2, scale2 = unpack_location_scale(w, 4)
        np.testing.assert_array_equal(m, m2)
        np.testing.assert_array_equal(scale, scale2)

    def test_positive_diagonal_enforced(self):
        with pytest.raises(ValueError):
            pack_location_scale(np.zeros(2), np.array([[1.0, 0.0], [0.5, -1.0]]))
        with pytest.raises(ValueError):
            pack_location_scale(np.zeros(2), np.array([[1.0, 0.3], [0.0, 1.0]]))


class TestAnalyticVarianceOracle:
    def test_matches_exhaustive_enumeration(self):
        p = make_quadratic_problem(4, 1, 1.0, seed=17)
        rng = np.random.default_rng(3)
        x = rng.standard_normal(1)
        for strategy in ("without_replacement", "with_replacement"):
            for sharing in ("shared", "independent"):
                for b, m in ((2, 1), (3, 2), (1, 4)):
                    want = exhaustive_subset_variance(p, x, b, m, sharing, strategy)
                    got = analytic_variance_oracle(p, x, b, m, sharing, strategy)
                    np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_full_batch_shared_keeps_only_monte_carlo_term(self):
        p = make_quadratic_problem(8, 5, 2.0, seed=8)
        xs = global_optimum(p)
        m = 3
        lbar = np.mean(p.components.smoothness)
        got = analytic_variance_oracle(p, xs, p.n, m, "shared", "without_replacement")
        assert got == pytest.approx(p.d / m * lbar ** 2, rel=1e-12)

    def test_large_m_leaves_subsampling_term(self):
        p = make_quadratic_problem(8, 3, 2.0, seed=8)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(3)
        b = 2
        inv_beff = (p.n - b) / ((p.n - 1) * b)
        a = component_gradients(p, x)
        var_a = np.mean(np.sum((a - a.mean(axis=0)) ** 2, axis=1))
        got = analytic_variance_oracle(p, x, b, 10 ** 12, "shared", "without_replacement")
        assert got == pytest.approx(inv_beff * var_a, rel=1e-9)

    def test_parameter_errors(self):
        p = make_quadratic_problem(4, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            analytic_variance_oracle(p, np.zeros(2), 5, 1, "shared", "without_replacement")
        q = make_reparam_problem(3, 2, seed=0)
        with pytest.raises(ValueError):
            analytic_variance_oracle(q, np.zeros(q.d), 1, 1, "shared", "without_replacement")


class TestSerialization:
    @pytest.mark.parametrize("maker", [
        lambda: make_quadratic_problem(6, 3, 1.0, seed=4),
        lambda: make_smoothing_erm_problem(6, 3, 0.4, seed=4),
        lambda: make_reparam_problem(5, 2, seed=4),
    ])
    def test_round_trip(self, maker, tmp_path):
        p = maker()
        q = problem_from_dict(problem_to_dict(p))
        assert q.kind == p.kind and q.n == p.n and q.d == p.d and q.seed == p.seed
        path = tmp_path / "instance.json"
        save_problem(p, path)
        r = load_problem(path)
        x = np.linspace(-1, 1, p.d)
        if p.kind == "reparam":
            x = reparam_initial_point(p)
        np.testing.assert_array_equal(objective_and_gradient(p, x)[1],
                                      objective_and_gradient(r, x)[1])
