"""Parallel transport of momenta along geodesics, and trajectory transfer.

transport_fanning moves a tangent vector rung by rung with central-difference
Jacobi-field estimates (two perturbed shoots per rung), then rescales so the
kernel norm of the vector and its pairing with the geodesic velocity are
conserved exactly.  transport_schild is the classical parallelogram ladder,
kept as a cross-validation oracle: its logs are inner registrations on
control-point clouds.

exp_parallelize transports a subject-matching vector along the reference and
shoots it from every visited point; geodesic_parallelize transports the
reference velocity along the matching and shoots a single subject geodesic.
"""

from dataclasses import dataclass

import numpy as np

from .deformation import (
    DeformationParams,
    Geodesic,
    flow_shape,
    shape_at,
    shoot,
    state_at,
)
from .errors import InvalidInputError
from .estimation import FitConfig, register_point_cloud
from .kernels import gram

_RIDGE = 1e-12


@dataclass(frozen=True)
class TransportJob:
    """One transport task along the unit-time parameterization of a geodesic."""

    reference: Geodesic
    w: np.ndarray                  # momenta at the reference control points
    s_from: float = 0.0
    s_to: float = 1.0
    rungs: int = 20
    epsilon: float | None = None   # perturbation scale; auto-chosen per rung if None

    def __post_init__(self):
        if self.rungs < 1:
            raise InvalidInputError(f"rungs must be >= 1, got {self.rungs}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")
        w = np.asarray(self.w, dtype=float)
        if w.shape != self.reference.params.control_points.shape:
            raise InvalidInputError(
                f"w shape {w.shape} does not match reference control points"
            )
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class ParallelTrajectory:
    mode: str                      # "exp_parallel" | "geodesic_parallel"
    reference: Geodesic
    matching: np.ndarray
    samples: tuple                 # ((t, ShapeComplex), ...) ordered in t
    geodesic: Geodesic | None = None   # the subject geodesic, geodesic_parallel only

    def __post_init__(self):
        ts = [t for t, _ in self.samples]
        if any(t2 < t1 for t1, t2 in zip(ts, ts[1:])):
            raise InvalidInputError("samples must be ordered in time")
        object.__setattr__(self, "samples", tuple(self.samples))


def momenta_inner(a, b, control_points, sigma_V):
    """Cometric pairing a^T K(c, c) b of two momenta fields."""
    K = gram(control_points, control_points, sigma_V)
    return float(np.sum(a * (K @ b)))


def _advance_state(c, beta, dt, kernel, steps=1):
    """Move (c, beta) along its own geodesic by time dt (exact time rescaling)."""
    if dt == 0.0:
        return c.copy(), beta.copy()
    flow = shoot(DeformationParams(c, dt * beta, kernel), steps)
    c_end, b_end = flow.end_state()
    return c_end, b_end / dt


def _state_on_unit_geodesic(params, s, steps_per_unit=20):
    """State at position s of the unit-time geodesic generated by params."""
    if s == 0.0:
        return params.control_points.copy(), params.momenta.copy()
    steps = max(1, int(np.ceil(steps_per_unit * abs(s))))
    return _advance_state(params.control_points, params.momenta, s,
                          params.kernel, steps)


def _enforce_invariants(w_raw, beta, c, sigma_V, norm0, pair0):
    """Gram-Schmidt rescaling: restore |w| and <w, beta> exactly."""
    K = gram(c, c, sigma_V)

    def ip(a, b):
        return float(np.sum(a * (K @ b)))

    bb = ip(beta, beta)
    if bb <= _RIDGE:
        ww = ip(w_raw, w_raw)
        return w_raw * np.sqrt(norm0 / ww) if ww > 0 else w_raw
    ub = ip(w_raw, beta)
    u_perp = w_raw - (ub / bb) * beta
    pp = ip(u_perp, u_perp)
    par = (pair0 / bb) * beta
    perp_target2 = max(norm0 - pair0**2 / bb, 0.0)
    if pp <= 1e-16 * max(norm0, 1e-300):
        return par
    return par + np.sqrt(perp_target2 / pp) * u_perp


def transport_fanning_params(params, w, s_from=0.0, s_to=1.0, rungs=20,
                             epsilon=None, enforce=True, collect=None):
    """Fanning transport along the unit-time geodesic of params.

    collect, if given, is a list receiving per-rung diagnostics
    (raw norm drift, raw pairing drift) before enforcement.
    """
    w = np.asarray(w, dtype=float)
    if s_to == s_from or not np.any(w):
        return w.copy()
    kernel = params.kernel
    sigma_V = kernel.sigma_V
    c, beta = _state_on_unit_geodesic(params, s_from)
    K = gram(c, c, sigma_V)
    norm0 = float(np.sum(w * (K @ w)))
    pair0 = float(np.sum(w * (K @ beta)))
    bb0 = float(np.sum(beta * (K @ beta)))
    h = (s_to - s_from) / rungs
    for _ in range(rungs):
        c_next, b_next = _advance_state(c, beta, h, kernel)
        if epsilon is not None:
            eps = epsilon
        else:
            K = gram(c, c, sigma_V)
            ww = float(np.sum(w * (K @ w)))
            bb = float(np.sum(beta * (K @ beta)))
            scale = np.sqrt(bb / ww) if bb > 0 and ww > 0 else 1.0 / max(np.sqrt(ww), 1e-12)
            eps = 0.1 * abs(h) * scale
        plus = shoot(DeformationParams(c, h * (beta + eps * w), kernel), 1)
        minus = shoot(DeformationParams(c, h * (beta - eps * w), kernel), 1)
        jacobi = (plus.c_path[-1] - minus.c_path[-1]) / (2.0 * eps)
        velocity = jacobi / h
        G = gram(c_next, c_next, sigma_V)
        G[np.diag_indices_from(G)] += _RIDGE
        w_raw = np.linalg.solve(G, velocity)
        if collect is not None:
            Kn = gram(c_next, c_next, sigma_V)
            raw_norm = float(np.sum(w_raw * (Kn @ w_raw)))
            raw_pair = float(np.sum(w_raw * (Kn @ b_next)))
            collect.append({
                "norm_drift": abs(raw_norm - norm0) / norm0,
                "pair_drift": abs(raw_pair - pair0) / max(abs(pair0), np.sqrt(norm0 * bb0), 1e-300),
            })
        w = _enforce_invariants(w_raw, b_next, c_next, sigma_V, norm0, pair0) \
            if enforce else w_raw
        c, beta = c_next, b_next
    return w


def transport_fanning(job, enforce=True, collect=None):
    """Fanning transport for a TransportJob; returns momenta at c(s_to)."""
    return transport_fanning_params(
        job.reference.params, job.w, job.s_from, job.s_to, job.rungs,
        job.epsilon, enforce=enforce, collect=collect,
    )


def transport_schild(job, fit_config=None):
    """Schild's ladder transport: parallelogram construction per rung.

    Riemannian logs are solved by registering control-point clouds; intended
    as a small-instance oracle for transport_fanning, not a production path.
    """
    params = job.reference.params
    kernel = params.kernel
    w = np.asarray(job.w, dtype=float)
    if job.s_to == job.s_from or not np.any(w):
        return w.copy()
    cfg = fit_config or FitConfig(kernel=kernel, lambda_reg=1e-6, tol=1e-12,
                                  max_iters=600, steps=10)
    c, beta = _state_on_unit_geodesic(params, job.s_from)
    h = (job.s_to - job.s_from) / job.rungs
    delta = abs(h)

    def log(base, target, rung):
        res = register_point_cloud(base, target, kernel, cfg)
        initial = res.iterations[0].objective
        if res.residual > max(1e-5 * initial, 1e-14):
            raise InvalidInputError(
                f"Schild inner registration failed at rung {rung} "
                f"(residual {res.residual:.2e} of initial {initial:.2e})"
            )
        return res.params.momenta

    def exp(base, momenta, scale=1.0):
        flow = shoot(DeformationParams(base, scale * momenta, kernel), cfg.steps)
        return flow.c_path[-1]

    for rung in range(job.rungs):
        c_next, b_next = _advance_state(c, beta, h, kernel)
        p = exp(c, w, delta)
        midpoint = exp(p, log(p, c_next, rung), 0.5)
        q = exp(c, log(c, midpoint, rung), 2.0)
        w = log(c_next, q, rung) / delta
        c, beta = c_next, b_next
    return w


# ---------------------------------------------------------------------------
# Trajectory transfer
# ---------------------------------------------------------------------------

def exp_parallelize(reference, matching, times, baseline_time=None,
                    rungs_per_year=10, steps=20):
    """Transport the matching along the reference and shoot from every point.

    matching holds unit-time momenta at the reference control points carried
    to baseline_time (default: the reference t_ref).
    """
    matching = np.asarray(matching, dtype=float)
    t_b = reference.t_ref if baseline_time is None else baseline_time
    times = sorted(times)
    samples = {}

    def build_sample(t, w_t):
        c_t, _ = state_at(reference, t, steps)
        base_shape = shape_at(reference, t, steps)
        if not np.any(w_t):
            return base_shape
        flow = shoot(DeformationParams(c_t, w_t, reference.params.kernel), steps)
        return flow_shape(flow, base_shape)

    for direction in (+1, -1):
        targets = [t for t in times if (t > t_b if direction > 0 else t < t_b)]
        targets.sort(reverse=direction < 0)
        t_cur, w_cur = t_b, matching
        for t in targets:
            dt = t - t_cur
            c_cur, beta_y_cur = state_at(reference, t_cur, steps)
            segment = DeformationParams(
                c_cur, dt * beta_y_cur, reference.params.kernel
            )
            rungs = max(1, int(np.ceil(rungs_per_year * abs(dt))))
            w_cur = transport_fanning_params(segment, w_cur, 0.0, 1.0, rungs)
            t_cur = t
            samples[t] = build_sample(t, w_cur)
    for t in times:
        if t not in samples:         # t == t_b
            samples[t] = build_sample(t, matching)

    return ParallelTrajectory(
        mode="exp_parallel",
        reference=reference,
        matching=matching,
        samples=tuple((t, samples[t]) for t in times),
    )


def geodesic_parallelize(reference, matching, times, baseline_time=None,
                         rungs=20, steps=20):
    """Transport the reference velocity along the matching, then shoot once.

    The output samples lie on a single geodesic through the subject baseline.
    """
    matching = np.asarray(matching, dtype=float)
    t_b = reference.t_ref if baseline_time is None else baseline_time
    kernel = reference.params.kernel
    c_b, beta_y_b = state_at(reference, t_b, steps)
    baseline_shape = shape_at(reference, t_b, steps)

    if not np.any(matching):
        subject_params = DeformationParams(c_b, beta_y_b, kernel)
        subject_template = baseline_shape
        c_sub = c_b
    else:
        matching_params = DeformationParams(c_b, matching, kernel)
        flow_m = shoot(matching_params, steps)
        subject_template = flow_shape(flow_m, baseline_shape)
        c_sub = flow_m.c_path[-1]
        velocity = transport_fanning_params(matching_params, beta_y_b,
                                            0.0, 1.0, rungs)
        subject_params = DeformationParams(c_sub, velocity, kernel)

    subject_geodesic = Geodesic(template=subject_template, params=subject_params,
                                t_ref=t_b, span=(t_b, t_b))
    samples = tuple(
        (t, shape_at(subject_geodesic, t, steps)) for t in sorted(times)
    )
    return ParallelTrajectory(
        mode="geodesic_parallel",
        reference=reference,
        matching=matching,
        samples=samples,
        geodesic=subject_geodesic,
    )
