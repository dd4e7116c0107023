import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeflow.errors import InterpolationRangeError, InvalidInputError
from shapeflow.timewarp import (
    ReferenceCurve,
    ScoreSeries,
    TimeWarp,
    compose_warps,
    evaluate_trajectory,
    fit_timewarp,
    invert_warp,
    psi,
    psi_inverse,
    read_scores_csv,
    reparametrize_trajectory,
)

CURVE = ReferenceCurve(t_mid=74.0, scale=3.0)

alpha_st = st.floats(0.1, 10.0)
tau_st = st.floats(-25.0, 25.0)
t_st = st.floats(30.0, 110.0)


class TestPsi:
    def test_identity_warp(self):
        w = TimeWarp(1.0, 0.0, 70.0)
        for t in (0.0, 70.0, 93.4):
            assert psi(t, w) == t

    def test_fixed_point(self):
        w = TimeWarp(1.7, 4.0, 70.0)
        assert psi(70.0 + 4.0, w) == pytest.approx(70.0)

    def test_fast_progressor(self):
        assert psi(75.0, TimeWarp(2.0, 0.0, 70.0)) == pytest.approx(80.0)

    def test_inverse_fixed_point(self):
        assert psi_inverse(70.0, TimeWarp(0.5, 4.0, 70.0)) == pytest.approx(74.0)

    def test_round_trip_1000(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            w = TimeWarp(float(np.exp(r.uniform(np.log(0.1), np.log(10)))),
                         float(r.uniform(-25, 25)), float(r.uniform(40, 100)))
            u = float(r.uniform(0, 150))
            assert abs(psi(psi_inverse(u, w), w) - u) <= 1e-12

    @given(alpha=alpha_st, tau=tau_st, t0=t_st, a=t_st, b=t_st)
    @settings(max_examples=50)
    def test_affine_midpoint(self, alpha, tau, t0, a, b):
        w = TimeWarp(alpha, tau, t0)
        mid = psi(0.5 * (a + b), w)
        expect = 0.5 * (psi(a, w) + psi(b, w))
        assert mid == pytest.approx(expect, rel=1e-12, abs=1e-9)

    @given(alpha=alpha_st, tau=tau_st, t0=t_st)
    @settings(max_examples=50)
    def test_strictly_increasing(self, alpha, tau, t0):
        w = TimeWarp(alpha, tau, t0)
        assert psi(71.0, w) > psi(70.0, w)

    def test_invert_and_compose(self):
        w1 = TimeWarp(1.7, 2.0, 70.0)
        w2 = TimeWarp(0.6, -4.0, 72.0)
        comp = compose_warps(w1, w2)
        for t in (60.0, 70.0, 88.3):
            assert psi(t, comp) == pytest.approx(psi(psi(t, w2), w1), abs=1e-9)
        inv = invert_warp(w1)
        for t in (60.0, 75.0):
            assert psi(t, inv) == pytest.approx(psi_inverse(t, w1), abs=1e-12)

    def test_rejects_bad_alpha(self):
        with pytest.raises(InvalidInputError):
            TimeWarp(0.0, 0.0, 70.0)
        with pytest.raises(InvalidInputError):
            TimeWarp(-1.0, 0.0, 70.0)


class TestScoreSeries:
    def test_needs_two_points(self):
        with pytest.raises(InvalidInputError):
            ScoreSeries(np.array([70.0]), np.array([0.1]))

    def test_needs_increasing_times(self):
        with pytest.raises(InvalidInputError):
            ScoreSeries(np.array([70.0, 70.0]), np.array([0.1, 0.2]))


class TestFitTimewarp:
    def test_noiseless_inversion(self):
        truth = TimeWarp(2.0, 3.0, 70.0)
        t = 70.0 + 1.5 * np.arange(6)
        series = ScoreSeries(t, CURVE.value(psi(t, truth)))
        fit = fit_timewarp(series, CURVE, 70.0)
        assert abs(fit.alpha - 2.0) / 2.0 <= 0.02
        assert abs(fit.tau - 3.0) <= 0.1

    def test_identity_recovery(self):
        t = 70.0 + np.arange(6)
        series = ScoreSeries(t, CURVE.value(t))
        fit = fit_timewarp(series, CURVE, 70.0)
        assert abs(fit.alpha - 1.0) <= 0.02
        assert abs(fit.tau) <= 0.1

    def test_unidentifiable_flagged(self):
        flat_curve = ReferenceCurve(t_mid=500.0, scale=1.0)
        series = ScoreSeries(np.array([10.0, 11.0, 12.0]), np.zeros(3))
        fit = fit_timewarp(series, flat_curve, 10.0)
        assert not fit.identifiable
        assert fit.alpha == 1.0 and fit.tau == 0.0

    def test_time_shift_consistency(self):
        truth = TimeWarp(1.6, -1.0, 70.0)
        t = 70.0 + np.arange(7)
        series = ScoreSeries(t, CURVE.value(psi(t, truth)))
        base = fit_timewarp(series, CURVE, 70.0)
        delta = 2.5
        shifted = fit_timewarp(ScoreSeries(t + delta, series.scores), CURVE, 70.0)
        assert abs(shifted.tau - (base.tau + delta)) <= 1e-3
        assert abs(shifted.alpha - base.alpha) / base.alpha <= 1e-6

    def test_paper_range_priors_recoverable(self):
        # alpha drawn across [0.15, 6.01], tau across [-20.6, 22.8]
        r = np.random.default_rng(5)
        wide = ReferenceCurve(t_mid=74.0, scale=8.0)
        for _ in range(10):
            alpha = float(np.exp(r.uniform(np.log(0.15), np.log(6.01))))
            tau = float(r.uniform(-20.6, 22.8))
            truth = TimeWarp(alpha, tau, 70.0)
            t = 70.0 + 2.0 * np.arange(8)
            series = ScoreSeries(t, wide.value(psi(t, truth)))
            fit = fit_timewarp(series, wide, 70.0)
            assert 0.1 <= fit.alpha <= 10.0
            assert -25.0 <= fit.tau <= 25.0


class TestReparametrize:
    @pytest.fixture
    def geodesic(self, kernel, small_sphere):
        from shapeflow.deformation import DeformationParams, Geodesic

        r = np.random.default_rng(3)
        params = DeformationParams(r.normal(0, 4, (5, 3)),
                                   r.normal(0, 0.3, (5, 3)), kernel)
        return Geodesic(template=small_sphere, params=params, t_ref=70.0,
                        span=(70.0, 76.0))

    def test_identity_warp_unchanged(self, geodesic):
        from shapeflow.deformation import shape_at

        warp = TimeWarp(1.0, 0.0, 70.0)
        out = reparametrize_trajectory(geodesic, warp, [71.0, 73.0])
        for t, shape in out:
            direct = shape_at(geodesic, t)
            assert np.array_equal(shape.concat_vertices(), direct.concat_vertices())

    def test_fast_progressor_sees_change_early(self, geodesic):
        from shapeflow.deformation import shape_at

        warp = TimeWarp(2.0, 0.0, 70.0)
        out = reparametrize_trajectory(geodesic, warp, [71.0])
        expect = shape_at(geodesic, 72.0)
        assert np.allclose(out[0][1].concat_vertices(), expect.concat_vertices())

    def test_sampled_trajectory_interpolation_bounds(self, geodesic):
        from shapeflow.deformation import shape_at
        from shapeflow.transport import ParallelTrajectory

        samples = tuple((t, shape_at(geodesic, t)) for t in (70.0, 72.0, 74.0))
        traj = ParallelTrajectory(mode="exp_parallel", reference=geodesic,
                                  matching=np.zeros((5, 3)), samples=samples)
        # exact node lookup
        out = evaluate_trajectory(traj, 72.0)
        assert np.array_equal(out.concat_vertices(), samples[1][1].concat_vertices())
        # interpolation between nodes stays between the endpoints
        mid = evaluate_trajectory(traj, 73.0)
        assert mid.concat_vertices() == pytest.approx(
            0.5 * (samples[1][1].concat_vertices() + samples[2][1].concat_vertices())
        )
        with pytest.raises(InterpolationRangeError):
            evaluate_trajectory(traj, 69.0)
        with pytest.raises(InterpolationRangeError):
            evaluate_trajectory(traj, 75.0)

    def test_composition_matches_composed_warp(self, geodesic):
        w1 = TimeWarp(1.5, 1.0, 70.0)
        w2 = TimeWarp(0.8, -2.0, 70.0)
        times = [71.0, 72.5]
        # reparametrize by w2 first, then w1 on the subject side
        step1 = reparametrize_trajectory(geodesic, w1, [psi(t, w2) for t in times])
        direct = reparametrize_trajectory(geodesic, compose_warps(w1, w2), times)
        for (_, a), (_, b) in zip(step1, direct):
            assert np.allclose(a.concat_vertices(), b.concat_vertices(),
                               rtol=0, atol=1e-12)


class TestScoresCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text(
            "subject_id,age,score\n"
            "s000,70.0,0.1\ns000,71.0,0.3\n"
            "ref,70.0,0.2\nref,72.0,0.4\n"
        )
        series = read_scores_csv(path)
        assert set(series) == {"s000", "ref"}
        assert np.allclose(series["s000"].times, [70.0, 71.0])
        assert np.allclose(series["ref"].scores, [0.2, 0.4])

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,age\n1,70\n")
        with pytest.raises(InvalidInputError):
            read_scores_csv(path)
