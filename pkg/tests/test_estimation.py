import numpy as np
import pytest

from shapeflow.deformation import DeformationParams, flow_shape, hamiltonian, shoot
from shapeflow.errors import InvalidInputError
from shapeflow.estimation import (
    FitConfig,
    Observation,
    control_grid,
    extrapolate,
    objective,
    objective_gradient,
    register,
    register_point_cloud,
    regress,
)
from shapeflow.kernels import KernelConfig, gram
from shapeflow.mesh import Mesh, dice, single


def tiny_instance(seed, n_points=4, sigma=2.0):
    r = np.random.default_rng(seed)
    kernel = KernelConfig(sigma_V=sigma, sigma_W=1.5)
    c0 = r.normal(0, 2, (n_points, 3))
    b0 = r.normal(0, 0.5, (n_points, 3))
    template = single(Mesh(r.normal(0, 2, (4, 3)),
                           np.array([[0, 1, 2], [1, 3, 2]]), "patch"))
    targets = [
        single(Mesh(r.normal(0, 2, (4, 3)), np.array([[0, 1, 2], [1, 3, 2]]), "patch"))
        for _ in range(2)
    ]
    obs = [Observation(1.0, targets[0]), Observation(2.2, targets[1])]
    cfg = FitConfig(kernel=kernel, steps=8, lambda_reg=1e-2,
                    optimize_template=True, optimize_control_points=True)
    return template, DeformationParams(c0, b0, kernel), obs, cfg


def numeric_gradient(f, x0, step):
    g = np.zeros_like(x0)
    for i in range(x0.shape[0]):
        for d in range(x0.shape[1]):
            xp = x0.copy()
            xm = x0.copy()
            xp[i, d] += step
            xm[i, d] -= step
            g[i, d] = (f(xp) - f(xm)) / (2 * step)
    return g


class TestObjective:
    def test_perfect_fit_is_zero(self, kernel, small_sphere):
        cfg = FitConfig(kernel=kernel)
        params = DeformationParams(np.zeros((2, 3)) + [[0., 0, 0], [5, 0, 0]],
                                   np.zeros((2, 3)), kernel)
        obs = [Observation(1.0, small_sphere), Observation(3.0, small_sphere)]
        val, residuals = objective(small_sphere, params, obs, 0.0, cfg)
        assert val <= 1e-9
        assert np.all(residuals <= 1e-9)

    def test_zero_momenta_pure_data_term(self, kernel, small_sphere):
        from shapeflow.mesh import complex_varifold_distance2

        target = small_sphere.translated((1.0, 0.0, 0.0))
        cfg = FitConfig(kernel=kernel, lambda_reg=0.0)
        params = DeformationParams(np.zeros((1, 3)), np.zeros((1, 3)), kernel)
        obs = [Observation(2.0, target)]
        val, _ = objective(small_sphere, params, obs, 0.0, cfg)
        assert val == pytest.approx(
            complex_varifold_distance2(small_sphere, target, kernel.sigma_W),
            rel=1e-10,
        )

    def test_lambda_linearity(self):
        template, params, obs, cfg = tiny_instance(0)
        cfg0 = FitConfig(**{**cfg.__dict__, "lambda_reg": 0.0})
        cfg2 = FitConfig(**{**cfg.__dict__, "lambda_reg": 2.0})
        v0, _ = objective(template, params, obs, 0.0, cfg0)
        v2, _ = objective(template, params, obs, 0.0, cfg2)
        h = hamiltonian(params.control_points, params.momenta, cfg.kernel.sigma_V)
        assert v2 - v0 == pytest.approx(2.0 * 2.0 * h, rel=1e-12)


class TestObjectiveGradient:
    def test_matches_finite_differences(self):
        step = 1e-5
        for seed in range(20):
            template, params, obs, cfg = tiny_instance(seed)
            grads = objective_gradient(template, params, obs, 0.0, cfg)

            def f_beta(b):
                p = DeformationParams(params.control_points, b, cfg.kernel)
                return objective(template, p, obs, 0.0, cfg)[0]

            def f_c(c):
                p = DeformationParams(c, params.momenta, cfg.kernel)
                return objective(template, p, obs, 0.0, cfg)[0]

            def f_x(x):
                return objective(template.with_concat_vertices(x), params,
                                 obs, 0.0, cfg)[0]

            checks = [
                (grads.momenta, numeric_gradient(f_beta, params.momenta, step)),
                (grads.control_points, numeric_gradient(f_c, params.control_points, step)),
                (grads.template, numeric_gradient(f_x, template.concat_vertices(), step)),
            ]
            for got, want in checks:
                scale = max(np.abs(want).max(), 1e-12)
                assert np.abs(got - want).max() / scale <= 1e-4

    def test_zero_gradient_at_perfect_fit(self, kernel, small_sphere):
        cfg = FitConfig(kernel=kernel, optimize_template=True)
        params = DeformationParams(np.array([[0.0, 0, 0], [3.0, 0, 0]]),
                                   np.zeros((2, 3)), kernel)
        obs = [Observation(1.0, small_sphere)]
        grads = objective_gradient(small_sphere, params, obs, 0.0, cfg)
        assert np.abs(grads.momenta).max() <= 1e-8
        assert np.abs(grads.template).max() <= 1e-8

    def test_regularizer_gradient_block(self, rng, kernel, small_sphere):
        # keep the data term flat by observing the template at t_ref
        cfg = FitConfig(kernel=kernel, lambda_reg=0.7, optimize_template=False)
        c = rng.normal(0, 4, (5, 3))
        b = rng.normal(0, 1, (5, 3))
        params = DeformationParams(c, b, kernel)
        obs = [Observation(0.0, small_sphere)]
        grads = objective_gradient(small_sphere, params, obs, 0.0, cfg)
        expect = 2.0 * 0.7 * gram(c, c, kernel.sigma_V) @ b
        assert np.allclose(grads.momenta, expect, rtol=1e-10, atol=1e-12)


class TestRegister:
    def test_identity_registration(self, kernel, small_sphere):
        cfg = FitConfig(kernel=kernel, max_iters=30)
        res = register(small_sphere, small_sphere, cfg)
        energy = hamiltonian(res.params.control_points, res.params.momenta,
                             kernel.sigma_V)
        assert energy <= 1e-6

    def test_objective_reproducible(self, kernel, small_sphere):
        target = small_sphere.translated((1.0, 0.5, 0.0))
        cfg = FitConfig(kernel=kernel, max_iters=40, tol=1e-5)
        res = register(small_sphere, target, cfg)
        cfg_eval = FitConfig(**{**cfg.__dict__, "optimize_template": False})
        val, _ = objective(small_sphere, res.params,
                           [Observation(1.0, target)], 0.0, cfg_eval)
        assert val == pytest.approx(res.final_objective, abs=1e-10)

    @pytest.mark.slow
    def test_translation_recovery_dice(self, kernel, small_sphere):
        target = small_sphere.translated((2.0, 0.0, 0.0))
        cfg = FitConfig(kernel=kernel, max_iters=120, tol=1e-6)
        res = register(small_sphere, target, cfg)
        deformed = flow_shape(shoot(res.params, 20), small_sphere)
        assert dice(deformed, target, 0.5) >= 0.95

    @pytest.mark.slow
    def test_approximate_inverse_consistency(self, kernel, small_sphere):
        target = small_sphere.translated((1.5, 0.8, 0.0))
        cfg = FitConfig(kernel=kernel, max_iters=100, tol=1e-6)
        fwd = register(small_sphere, target, cfg)
        bwd = register(target, small_sphere, cfg)
        roundtrip = flow_shape(
            shoot(bwd.params, 20), flow_shape(shoot(fwd.params, 20), small_sphere)
        )
        assert dice(roundtrip, small_sphere, 0.5) >= 0.9

    def test_translation_equivariance(self, kernel, small_sphere):
        target = small_sphere.translated((1.2, -0.4, 0.6))
        cfg = FitConfig(kernel=kernel, max_iters=25, tol=1e-8)
        res = register(small_sphere, target, cfg)
        delta = np.array([40.0, -25.0, 10.0])
        res_shifted = register(small_sphere.translated(delta),
                               target.translated(delta), cfg)
        assert np.abs(
            res_shifted.params.control_points - res.params.control_points - delta
        ).max() <= 1e-6
        assert np.abs(res_shifted.params.momenta - res.params.momenta).max() <= 1e-6


class TestRegress:
    def test_needs_two_observations(self, kernel, small_sphere):
        with pytest.raises(InvalidInputError):
            regress([Observation(1.0, small_sphere)], FitConfig(kernel=kernel))

    def test_needs_distinct_ages(self, kernel, small_sphere):
        obs = [Observation(1.0, small_sphere), Observation(1.0, small_sphere)]
        with pytest.raises(InvalidInputError):
            regress(obs, FitConfig(kernel=kernel))

    def test_constant_trajectory_zero_energy(self, kernel, small_sphere):
        obs = [Observation(70.0, small_sphere), Observation(73.0, small_sphere)]
        cfg = FitConfig(kernel=kernel, max_iters=25)
        res = regress(obs, cfg)
        energy = hamiltonian(res.geodesic.params.control_points,
                             res.geodesic.params.momenta, kernel.sigma_V)
        assert energy <= 1e-8

    def test_objective_monotone_and_order_invariant(self, kernel, small_sphere):
        target = small_sphere.translated((1.0, 0.0, 0.0))
        obs = [Observation(70.0, small_sphere), Observation(72.0, target)]
        cfg = FitConfig(kernel=kernel, max_iters=20)
        res = regress(obs, cfg)
        objs = [rec.objective for rec in res.iterations]
        assert all(b <= a for a, b in zip(objs, objs[1:]))
        res_rev = regress(list(reversed(obs)), cfg)
        assert np.array_equal(res_rev.geodesic.params.momenta,
                              res.geodesic.params.momenta)
        assert res_rev.final_objective == res.final_objective

    @pytest.mark.slow
    def test_synthetic_geodesic_recovery(self, kernel, sphere_complex):
        # truth: five noiseless visits on a synthetic geodesic
        r = np.random.default_rng(21)
        cps = control_grid(sphere_complex, 8.0, pad=2.0)
        beta = r.normal(0, 0.35, cps.shape)
        truth_params = DeformationParams(cps, beta, kernel)
        from shapeflow.deformation import Geodesic, shape_at

        truth = Geodesic(template=sphere_complex, params=truth_params,
                         t_ref=70.0, span=(70.0, 74.0))
        ages = [70.0, 71.0, 72.0, 73.0, 74.0]
        obs = [Observation(t, shape_at(truth, t)) for t in ages]
        cfg = FitConfig(kernel=kernel, max_iters=150, tol=1e-7,
                        control_spacing=8.0)
        res = regress(obs, cfg)
        for o in obs:
            fitted = shape_at(res.geodesic, o.t)
            assert dice(fitted, o.shape, 1.0) >= 0.95
        pred = extrapolate(res, 76.0)
        assert dice(pred, shape_at(truth, 76.0), 1.0) >= 0.9


class TestControlGrid:
    def test_anchored_to_bbox(self, small_sphere):
        pts = control_grid(small_sphere, 5.0)
        v = small_sphere.concat_vertices()
        assert pts.min(axis=0) == pytest.approx(v.min(axis=0) - 5.0)
        assert np.all(pts.max(axis=0) <= v.max(axis=0) + 5.0 + 1e-9)

    def test_rejects_bad_spacing(self, small_sphere):
        with pytest.raises(InvalidInputError):
            control_grid(small_sphere, 0.0)


class TestRegisterPointCloud:
    def test_recovers_small_displacement(self, kernel, rng):
        src = rng.normal(0, 3, (6, 3))
        params = DeformationParams(src, rng.normal(0, 0.2, (6, 3)), kernel)
        tgt = shoot(params, 10).c_path[-1]
        res = register_point_cloud(src, tgt, kernel)
        reached = shoot(res.params, 10).c_path[-1]
        assert np.abs(reached - tgt).max() <= 5e-3
