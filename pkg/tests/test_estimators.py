"""Gradient integrands, Monte Carlo components, and the doubly stochastic gradient."""

import itertools

import numpy as np
import pytest

from doublysgd.estimators import (
    NoiseBlock,
    component_gradient_integrand,
    doubly_stochastic_gradient,
    draw_batches,
    draw_noise_block,
    monte_carlo_component,
    sample_gradient_estimates,
)
from doublysgd.problems import (
    component_gradients,
    global_optimum,
    make_quadratic_problem,
    make_reparam_problem,
    make_smoothing_erm_problem,
    objective_and_gradient,
    pack_location_scale,
    quadratic_problem_from_parts,
    reparam_initial_point,
)


class TestIntegrand:
    def test_quadratic_zero_noise_at_center(self):
        p = quadratic_problem_from_parts([2.0], [[1.0, -1.0]])
        g = component_gradient_integrand(p, 0, np.array([1.0, -1.0]), np.zeros(2))
        np.testing.assert_array_equal(g, np.zeros(2))

    def test_quadratic_hand_value(self):
        # L = 2, x = 1, center = 0, eta = 0.5 -> 2 * (1 - 0 + 0.5) = 3
        p = quadratic_problem_from_parts([2.0], [[0.0]])
        g = component_gradient_integrand(p, 0, np.array([1.0]), np.array([0.5]))
        assert g[0] == pytest.approx(3.0)

    def test_reparam_zero_at_target_with_zero_draw(self):
        p = make_reparam_problem(3, 2, seed=1)
        w = pack_location_scale(p.components.targets[1], np.eye(2))
        g = component_gradient_integrand(p, 1, w, np.zeros(2))
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_reparam_matches_finite_differences(self):
        # chain rule through z = C u + m, checked against numeric dw
        p = make_reparam_problem(4, 3, seed=5)
        rng = np.random.default_rng(0)
        w = reparam_initial_point(p) + 0.2 * rng.standard_normal(p.d)
        u = rng.standard_normal(3)

        def integrand_value(w_):
            from doublysgd.problems import unpack_location_scale
            loc, scale = unpack_location_scale(w_, 3)
            z = scale @ u + loc
            L = p.components.smoothness[2]
            return 0.5 * L * np.sum((z - p.components.targets[2]) ** 2)

        g = component_gradient_integrand(p, 2, w, u)
        h = 1e-6
        fd = np.empty(p.d)
        for j in range(p.d):
            e = np.zeros(p.d)
            e[j] = h
            fd[j] = (integrand_value(w + e) - integrand_value(w - e)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


class TestMonteCarloComponent:
    def test_single_draw_equals_integrand(self):
        p = make_quadratic_problem(5, 3, 1.0, seed=2)
        rng = np.random.default_rng(3)
        x = rng.standard_normal(3)
        block = draw_noise_block(p, 1, rng)
        np.testing.assert_array_equal(
            monte_carlo_component(p, 1, x, block),
            component_gradient_integrand(p, 1, x, block.draws[0]))

    def test_antithetic_draws_cancel_noise_exactly(self):
        p = make_quadratic_problem(5, 3, 1.0, seed=2)
        rng = np.random.default_rng(4)
        x = rng.standard_normal(3)
        eta = rng.standard_normal(3)
        block = NoiseBlock(draws=np.stack([eta, -eta]), sharing="shared")
        got = monte_carlo_component(p, 0, x, block)
        exact = component_gradients(p, x)[0]
        np.testing.assert_allclose(got, exact, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("maker", [
        lambda: make_quadratic_problem(5, 3, 1.0, seed=6),
        lambda: make_smoothing_erm_problem(5, 3, 0.6, seed=6),
        lambda: make_reparam_problem(4, 2, seed=6),
    ])
    def test_unbiased_for_component_gradient(self, maker):
        p = maker()
        rng = np.random.default_rng(8)
        x = reparam_initial_point(p) if p.kind == "reparam" else rng.standard_normal(p.d)
        exact = component_gradients(p, x)[2]
        reps = 20000
        draws = np.stack([
            monte_carlo_component(p, 2, x, draw_noise_block(p, 2, rng))
            for _ in range(reps)
        ])
        se = np.std(draws, axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(draws.mean(axis=0) - exact) <= 3 * se + 1e-12)

    def test_shared_noise_deviation_is_exact_constant_multiple(self):
        # g_i - E[g_i] = L_i * (block mean), the equality case of the
        # correlation condition at rho = 1
        p = make_quadratic_problem(6, 4, 2.0, seed=9)
        rng = np.random.default_rng(10)
        x = rng.standard_normal(4)
        block = draw_noise_block(p, 3, rng)
        eta_bar = block.draws.mean(axis=0)
        exact = component_gradients(p, x)
        for i in range(p.n):
            got = monte_carlo_component(p, i, x, block) - exact[i]
            np.testing.assert_allclose(got, p.components.smoothness[i] * eta_bar,
                                       rtol=1e-12, atol=1e-12)


class TestDoublyStochasticGradient:
    def test_singleton_batch_equals_component_estimate(self):
        p = make_quadratic_problem(6, 3, 1.0, seed=12)
        x = np.ones(3)
        est = doubly_stochastic_gradient(p, [4], x, 3, "shared",
                                         np.random.default_rng(77))
        block = draw_noise_block(p, 3, np.random.default_rng(77))
        np.testing.assert_array_equal(est.value, monte_carlo_component(p, 4, x, block))

    def test_value_is_average_of_retained_components(self):
        p = make_reparam_problem(5, 2, seed=13)
        x = reparam_initial_point(p)
        est = doubly_stochastic_gradient(p, [0, 2, 2], x, 2, "independent",
                                         np.random.default_rng(5),
                                         retain_per_component=True)
        assert est.per_component.shape == (3, p.d)
        np.testing.assert_allclose(est.value, est.per_component.mean(axis=0),
                                   rtol=1e-12, atol=1e-12)

    def test_empty_batch_rejected(self):
        p = make_quadratic_problem(4, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            doubly_stochastic_gradient(p, [], np.zeros(2), 1, "shared",
                                       np.random.default_rng(0))

    def test_full_batch_deviation_scales_as_one_over_sqrt_m(self):
        p = make_quadratic_problem(6, 3, 1.0, seed=14)
        rng = np.random.default_rng(15)
        x = rng.standard_normal(3)
        _, grad = objective_and_gradient(p, x)
        ms = [1, 4, 16, 64]
        msd = []
        for m in ms:
            samples = sample_gradient_estimates(p, x, p.n, m, "shared",
                                                "without_replacement", 4000, rng)
            msd.append(np.mean(np.sum((samples - grad) ** 2, axis=1)))
        slope = np.polyfit(np.log(ms), np.log(msd), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.1)


class TestVectorizedSampler:
    def test_batch_drawing_uniform_over_subsets(self):
        draws = draw_batches("without_replacement", 2, 4, 60_000,
                             np.random.default_rng(16))
        counts = {frozenset(c): 0 for c in itertools.combinations(range(4), 2)}
        for row in draws:
            counts[frozenset(row.tolist())] += 1
        p = 1 / 6
        se = np.sqrt(p * (1 - p) / 60_000)
        for c in counts.values():
            assert abs(c / 60_000 - p) < 4 * se

    @pytest.mark.parametrize("maker,point", [
        (lambda: make_quadratic_problem(6, 3, 1.5, seed=20), "random"),
        (lambda: make_smoothing_erm_problem(6, 3, 0.5, seed=20), "random"),
        (lambda: make_reparam_problem(5, 2, seed=20), "initial"),
    ])
    @pytest.mark.parametrize("sharing", ["shared", "independent"])
    def test_agrees_with_reference_path(self, maker, point, sharing):
        """Vectorized sampler and per-call estimator share mean and variance."""
        p = maker()
        rng = np.random.default_rng(21)
        x = reparam_initial_point(p) if point == "initial" else rng.standard_normal(p.d)
        b, m, reps = 3, 2, 3000
        fast = sample_gradient_estimates(p, x, b, m, sharing,
                                         "without_replacement", reps, rng)
        slow_rng = np.random.default_rng(22)
        slow = np.stack([
            doubly_stochastic_gradient(
                p, slow_rng.choice(p.n, b, replace=False), x, m, sharing, slow_rng).value
            for _ in range(reps)
        ])
        # means agree within combined standard errors
        se = np.sqrt(np.var(fast, axis=0, ddof=1) / reps + np.var(slow, axis=0, ddof=1) / reps)
        assert np.all(np.abs(fast.mean(0) - slow.mean(0)) <= 4 * se + 1e-12)
        # trace variances agree within combined standard errors
        def trace_var_and_se(s):
            dev = np.sum((s - s.mean(0)) ** 2, axis=1)
            return np.sum(dev) / (reps - 1), np.std(dev, ddof=1) / np.sqrt(reps)
        v1, se1 = trace_var_and_se(fast)
        v2, se2 = trace_var_and_se(slow)
        assert abs(v1 - v2) <= 4 * np.hypot(se1, se2)

    def test_unbiased_against_full_gradient(self):
        p = make_quadratic_problem(8, 3, 2.0, seed=23)
        rng = np.random.default_rng(24)
        x = rng.standard_normal(3)
        _, grad = objective_and_gradient(p, x)
        samples = sample_gradient_estimates(p, x, 3, 2, "shared",
                                            "with_replacement", 40_000, rng)
        se = np.std(samples, axis=0, ddof=1) / np.sqrt(len(samples))
        assert np.all(np.abs(samples.mean(0) - grad) <= 3 * se + 1e-12)


def gauss_hermite_smoothed_gradient(p, i, w, nodes=40):
    """Dense tensor-product quadrature oracle for the smoothed risk gradient.

    Only practical for d <= 2; integrates the estimator integrand against
    the Gaussian perturbation law with physicists' Hermite nodes.
    """
    if p.d > 2:
        raise ValueError("quadrature oracle is dense; use d <= 2")
    t, wts = np.polynomial.hermite.hermgauss(nodes)
    nu = p.components.perturbation_scale
    grids = np.meshgrid(*([t] * p.d), indexing="ij")
    weights = np.ones_like(grids[0])
    for g in np.meshgrid(*([wts] * p.d), indexing="ij"):
        weights = weights * g
    weights = weights / np.pi ** (p.d / 2)
    total = np.zeros(p.d)
    it = np.nditer(weights, flags=["multi_index"])
    for wt in it:
        eps = np.array([np.sqrt(2.0) * nu * grids[k][it.multi_index]
                        for k in range(p.d)])
        total += float(wt) * component_gradient_integrand(p, i, w, eps)
    return total


class TestSmoothingQuadratureOracle:
    def test_estimator_mean_matches_quadrature(self):
        p = make_smoothing_erm_problem(5, 2, 0.8, seed=30)
        rng = np.random.default_rng(31)
        w = rng.standard_normal(2)
        for i in (0, 3):
            oracle = gauss_hermite_smoothed_gradient(p, i, w)
            # closed form of the smoothed risk gradient agrees with quadrature
            np.testing.assert_allclose(oracle, component_gradients(p, w)[i],
                                       rtol=1e-10, atol=1e-12)
            reps = 30_000
            draws = np.stack([
                monte_carlo_component(p, i, w, draw_noise_block(p, 1, rng))
                for _ in range(reps)
            ])
            se = np.std(draws, axis=0, ddof=1) / np.sqrt(reps)
            assert np.all(np.abs(draws.mean(0) - oracle) <= 3 * se + 1e-12)
