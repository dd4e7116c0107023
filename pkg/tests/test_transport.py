import numpy as np
import pytest

from shapeflow.deformation import DeformationParams, Geodesic, shoot
from shapeflow.errors import InvalidInputError
from shapeflow.mesh import make_icosphere, single
from shapeflow.transport import (
    ParallelTrajectory,
    TransportJob,
    exp_parallelize,
    geodesic_parallelize,
    momenta_inner,
    transport_fanning,
    transport_fanning_params,
    transport_schild,
)


@pytest.fixture
def reference(kernel):
    r = np.random.default_rng(13)
    params = DeformationParams(r.normal(0, 4, (8, 3)), r.normal(0, 0.7, (8, 3)),
                               kernel)
    template = single(make_icosphere(3.0, (0, 0, 0), 1, "ball"))
    return Geodesic(template=template, params=params, t_ref=0.0, span=(0.0, 1.0))


@pytest.fixture
def payload():
    return np.random.default_rng(14).normal(0, 0.5, (8, 3))


class TestFanning:
    def test_zero_vector(self, reference):
        out = transport_fanning(TransportJob(reference, np.zeros((8, 3))))
        assert np.all(out == 0.0)

    def test_empty_transport(self, reference, payload):
        out = transport_fanning(TransportJob(reference, payload, 0.4, 0.4))
        assert np.array_equal(out, payload)

    def test_invariants_conserved_exactly(self, reference, payload, kernel):
        sv = kernel.sigma_V
        params = reference.params
        out = transport_fanning(TransportJob(reference, payload, rungs=20))
        c1, b1 = shoot(params, 20).end_state()
        c0, b0 = params.control_points, params.momenta
        n0 = momenta_inner(payload, payload, c0, sv)
        p0 = momenta_inner(payload, b0, c0, sv)
        n1 = momenta_inner(out, out, c1, sv)
        p1 = momenta_inner(out, b1, c1, sv)
        assert abs(n1 - n0) / n0 <= 1e-12
        assert abs(p1 - p0) / max(abs(p0), 1e-12) <= 1e-10

    def test_velocity_transports_to_velocity(self, reference, kernel):
        params = reference.params
        out = transport_fanning(TransportJob(reference, params.momenta, rungs=20))
        c1, b1 = shoot(params, 20).end_state()
        err2 = momenta_inner(out - b1, out - b1, c1, kernel.sigma_V)
        ref2 = momenta_inner(b1, b1, c1, kernel.sigma_V)
        assert np.sqrt(err2 / ref2) <= 1e-3

    def test_raw_per_rung_drift_is_second_order(self, reference, payload):
        drifts = []
        for rungs in (10, 20, 40):
            diag = []
            transport_fanning_params(reference.params, payload, 0.0, 1.0,
                                     rungs=rungs, enforce=False, collect=diag)
            drifts.append(diag[0]["norm_drift"])
        assert drifts[0] / drifts[1] >= 3.0
        assert drifts[1] / drifts[2] >= 3.0

    def test_convergence_order_one(self, reference, payload, kernel):
        params = reference.params
        c1, _ = shoot(params, 20).end_state()
        n0 = momenta_inner(payload, payload, params.control_points, kernel.sigma_V)
        results = {r: transport_fanning_params(params, payload, 0.0, 1.0, rungs=r)
                   for r in (5, 10, 20, 40)}
        gaps = []
        for r in (5, 10, 20):
            d = results[2 * r] - results[r]
            gaps.append(np.sqrt(momenta_inner(d, d, c1, kernel.sigma_V) / n0))
        # successive-refinement gap shrinks at least linearly in 1/rungs
        assert gaps[1] <= gaps[0] / 1.5
        assert gaps[2] <= gaps[1] / 1.5

    def test_rejects_bad_job(self, reference, payload):
        with pytest.raises(InvalidInputError):
            TransportJob(reference, payload, rungs=0)
        with pytest.raises(InvalidInputError):
            TransportJob(reference, np.zeros((3, 3)))


class TestSchild:
    def test_zero_vector(self, reference):
        out = transport_schild(TransportJob(reference, np.zeros((8, 3)), rungs=2))
        assert np.all(out == 0.0)

    def test_flat_space_exact(self, kernel):
        # a single control point makes the group flat: transport is identity
        params = DeformationParams(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), kernel)
        ref = Geodesic(template=single(make_icosphere(2.0, (0, 0, 0), 1, "b")),
                       params=params, t_ref=0.0, span=(0.0, 1.0))
        w = np.array([[0.0, 2.0, 0.5]])
        out = transport_schild(TransportJob(ref, w, rungs=3))
        assert np.abs(out - w).max() / np.abs(w).max() <= 1e-3

    @pytest.mark.slow
    def test_agrees_with_fanning(self, reference, payload, kernel):
        job = TransportJob(reference, payload, rungs=10)
        ws = transport_schild(job)
        wf = transport_fanning(job)
        c1, _ = shoot(reference.params, 20).end_state()
        n0 = momenta_inner(payload, payload, reference.params.control_points,
                           kernel.sigma_V)
        d = ws - wf
        rel = np.sqrt(momenta_inner(d, d, c1, kernel.sigma_V) / n0)
        assert rel <= 5e-2


class TestExpParallelize:
    def test_zero_matching_reproduces_reference(self, reference):
        from shapeflow.deformation import shape_at

        traj = exp_parallelize(reference, np.zeros((8, 3)), [0.0, 0.5, 1.0])
        for t, shape in traj.samples:
            truth = shape_at(reference, t)
            scale = np.abs(truth.concat_vertices()).max()
            rms = np.sqrt(np.mean(
                (shape.concat_vertices() - truth.concat_vertices()) ** 2))
            assert rms <= 1e-9 * max(scale, 1.0)

    def test_baseline_equals_registration_end(self, reference, payload, kernel):
        from shapeflow.deformation import flow_shape

        traj = exp_parallelize(reference, payload, [0.0, 0.7])
        flow = shoot(DeformationParams(reference.params.control_points, payload,
                                       kernel), 20)
        expect = flow_shape(flow, reference.template)
        assert np.array_equal(traj.samples[0][1].concat_vertices(),
                              expect.concat_vertices())

    def test_samples_ordered(self, reference, payload):
        traj = exp_parallelize(reference, payload, [0.9, 0.1, 0.5])
        times = [t for t, _ in traj.samples]
        assert times == sorted(times)


class TestGeodesicParallelize:
    def test_zero_matching_reproduces_reference(self, reference):
        from shapeflow.deformation import shape_at

        traj = geodesic_parallelize(reference, np.zeros((8, 3)), [0.0, 0.5, 1.0])
        for t, shape in traj.samples:
            truth = shape_at(reference, t)
            rms = np.sqrt(np.mean(
                (shape.concat_vertices() - truth.concat_vertices()) ** 2))
            assert rms <= 1e-9

    def test_baseline_is_subject_shape(self, reference, payload, kernel):
        from shapeflow.deformation import flow_shape

        traj = geodesic_parallelize(reference, payload, [0.0])
        flow = shoot(DeformationParams(reference.params.control_points, payload,
                                       kernel), 20)
        expect = flow_shape(flow, reference.template)
        assert np.array_equal(traj.samples[0][1].concat_vertices(),
                              expect.concat_vertices())

    def test_output_lies_on_single_geodesic(self, reference, payload):
        from shapeflow.deformation import shape_at

        traj = geodesic_parallelize(reference, payload, [0.0, 0.4, 0.8])
        assert traj.geodesic is not None
        for t, shape in traj.samples:
            redone = shape_at(traj.geodesic, t)
            rms = np.sqrt(np.mean(
                (shape.concat_vertices() - redone.concat_vertices()) ** 2))
            assert rms <= 1e-3

    def test_unordered_samples_rejected(self, reference, payload):
        with pytest.raises(InvalidInputError):
            ParallelTrajectory(mode="exp_parallel", reference=reference,
                               matching=payload,
                               samples=((1.0, reference.template),
                                        (0.0, reference.template)))
