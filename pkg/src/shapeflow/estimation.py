"""Registration and geodesic regression by Nesterov-accelerated descent.

The objective is

    sum_j |deformed_template(t_j) - y_j|^2_varifold + lambda * 2 * H(c0, beta0)

and its gradient is the exact gradient of the discrete computation: reverse
accumulation through the stored RK4 stages of both the Hamiltonian flow and
the vertex flow, so it matches central finite differences to truncation error.
"""

from dataclasses import dataclass, field

import numpy as np

from .deformation import (
    DeformationParams,
    Geodesic,
    flow_points,
    hamiltonian,
    hamiltonian_field,
    shoot,
)
from .errors import InvalidInputError
from .kernels import (
    KernelConfig,
    cloud_distance2,
    cloud_distance2_gradient,
    convolve,
    convolve_vjp,
    gram,
)
from .mesh import (
    ShapeComplex,
    face_centroids_normals,
    normals_to_vertex_gradient,
    varifold_cross,
    varifold_cross_gradient,
)


@dataclass(frozen=True)
class Observation:
    """One visit: age in years and the observed shape complex."""

    t: float
    shape: ShapeComplex


@dataclass
class FitConfig:
    lambda_reg: float = 1e-2
    max_iters: int = 200
    tol: float = 1e-6                 # relative objective decrease
    initial_step: float = 1.0         # first update size after gradient normalization
    step_growth: float = 1.2          # step expansion on accepted iterations
    max_halvings: int = 40
    control_spacing: float | None = None     # grid spacing; defaults to sigma_V
    control_points: np.ndarray | None = None  # explicit layout overrides the grid
    optimize_template: bool = True
    optimize_control_points: bool = False
    kernel: KernelConfig = field(default_factory=KernelConfig)
    steps: int = 20                   # RK4 steps per unit-time shoot

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise InvalidInputError("lambda_reg must be >= 0")
        if self.tol <= 0:
            raise InvalidInputError("tol must be > 0")


@dataclass(frozen=True)
class Gradients:
    momenta: np.ndarray
    control_points: np.ndarray | None = None
    template: np.ndarray | None = None


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    step: float
    halvings: int


@dataclass(frozen=True)
class RegressionResult:
    geodesic: Geodesic
    final_objective: float
    residuals: np.ndarray            # per-observation varifold distance^2
    iterations: list
    converged: bool


@dataclass(frozen=True)
class RegistrationResult:
    params: DeformationParams
    final_objective: float
    residual: float
    iterations: list
    converged: bool


# ---------------------------------------------------------------------------
# Data-attachment terms (value + gradient w.r.t. moving point positions)
# ---------------------------------------------------------------------------

class VarifoldAttachment:
    """Label-wise squared varifold distance to a fixed target complex.

    Target centroids/normals and the target self term are precomputed once.
    """

    def __init__(self, template, target, sigma_W):
        if template.labels != target.labels:
            raise InvalidInputError(
                f"label mismatch: {template.labels} vs {target.labels}"
            )
        self._structure = template
        self._sigma_W = sigma_W
        self._targets = []
        for mesh in target:
            cb, vb = face_centroids_normals(mesh)
            bb = varifold_cross(cb, vb, cb, vb, sigma_W)
            self._targets.append((cb, vb, bb))

    def value(self, points):
        moved = self._structure.with_concat_vertices(points)
        total = 0.0
        for ma, (cb, vb, bb) in zip(moved, self._targets):
            ca, va = face_centroids_normals(ma)
            aa = varifold_cross(ca, va, ca, va, self._sigma_W)
            ab = varifold_cross(ca, va, cb, vb, self._sigma_W)
            total += max(aa - 2.0 * ab + bb, 0.0)
        return total

    def gradient(self, points):
        moved = self._structure.with_concat_vertices(points)
        grads = []
        for ma, (cb, vb, _) in zip(moved, self._targets):
            ca, va = face_centroids_normals(ma)
            bc_self, bn_self = varifold_cross_gradient(ca, va, ca, va, self._sigma_W)
            bc_x, bn_x = varifold_cross_gradient(ca, va, cb, vb, self._sigma_W)
            grads.append(normals_to_vertex_gradient(
                ma, 2.0 * (bc_self - bc_x), 2.0 * (bn_self - bn_x)
            ))
        return np.concatenate(grads, axis=0)


class CloudAttachment:
    """Gaussian kernel discrepancy to a fixed point cloud (Schild inner logs)."""

    def __init__(self, target_points, sigma_W):
        self._target = np.asarray(target_points, dtype=float)
        self._sigma_W = sigma_W

    def value(self, points):
        return cloud_distance2(points, self._target, self._sigma_W)

    def gradient(self, points):
        return cloud_distance2_gradient(points, self._target, self._sigma_W)


# ---------------------------------------------------------------------------
# Reverse-mode through the integrators
# ---------------------------------------------------------------------------

def _row_pair_sum(w, c):
    """sum_j w_ij (c_i - c_j) for a square weight matrix."""
    return w.sum(axis=1)[:, None] * c - w @ c


def _col_pair_sum(w, c):
    """sum_i w_ij (c_i - c_j), indexed by j."""
    return w.T @ c - w.sum(axis=0)[:, None] * c


def _field_vjp(c, beta, bar_cdot, bar_bdot, sigma_V):
    """VJP of hamiltonian_field at (c, beta)."""
    K = gram(c, c, sigma_V)
    two_s2 = 2.0 / sigma_V**2

    # c_dot_i = sum_j K_ij beta_j
    bar_beta = K @ bar_cdot
    w = (bar_cdot @ beta.T) * K * (-two_s2)
    bar_c = _row_pair_sum(w, c) - _col_pair_sum(w, c)

    # beta_dot_i = sum_j A_ij (c_i - c_j), A_ij = two_s2 K_ij (beta_i . beta_j)
    bb = beta @ beta.T
    A = two_s2 * K * bb
    # s_ij = bar_bdot_i . (c_i - c_j)
    s = np.sum(bar_bdot * c, axis=1)[:, None] - bar_bdot @ c.T
    bar_c += A.sum(axis=1)[:, None] * bar_bdot
    bar_c -= A.T @ bar_bdot
    u = s * two_s2 * bb * (-two_s2) * K
    bar_c += _row_pair_sum(u, c) - _col_pair_sum(u, c)
    r = s * two_s2 * K
    bar_beta += r @ beta
    bar_beta += r.T @ beta
    return bar_c, bar_beta


def _state_step_vjp(c, beta, h, sigma_V, bar_c_next, bar_beta_next):
    """VJP of one RK4 step of the Hamiltonian system (stages recomputed)."""
    k1c, k1b = hamiltonian_field(c, beta, sigma_V)
    y2c, y2b = c + 0.5 * h * k1c, beta + 0.5 * h * k1b
    k2c, k2b = hamiltonian_field(y2c, y2b, sigma_V)
    y3c, y3b = c + 0.5 * h * k2c, beta + 0.5 * h * k2b
    k3c, k3b = hamiltonian_field(y3c, y3b, sigma_V)
    y4c, y4b = c + h * k3c, beta + h * k3b

    bar_c = bar_c_next.copy()
    bar_b = bar_beta_next.copy()
    bk1c, bk1b = (h / 6.0) * bar_c_next, (h / 6.0) * bar_beta_next
    bk2c, bk2b = (h / 3.0) * bar_c_next, (h / 3.0) * bar_beta_next
    bk3c, bk3b = (h / 3.0) * bar_c_next, (h / 3.0) * bar_beta_next
    bk4c, bk4b = (h / 6.0) * bar_c_next, (h / 6.0) * bar_beta_next

    gc, gb = _field_vjp(y4c, y4b, bk4c, bk4b, sigma_V)
    bar_c += gc
    bar_b += gb
    bk3c += h * gc
    bk3b += h * gb

    gc, gb = _field_vjp(y3c, y3b, bk3c, bk3b, sigma_V)
    bar_c += gc
    bar_b += gb
    bk2c += 0.5 * h * gc
    bk2b += 0.5 * h * gb

    gc, gb = _field_vjp(y2c, y2b, bk2c, bk2b, sigma_V)
    bar_c += gc
    bar_b += gb
    bk1c += 0.5 * h * gc
    bk1b += 0.5 * h * gb

    gc, gb = _field_vjp(c, beta, bk1c, bk1b, sigma_V)
    bar_c += gc
    bar_b += gb
    return bar_c, bar_b


def _shoot_vjp(flow, bar_c_path, bar_beta_path):
    """Backpropagate cotangents injected at every path state to (c0, beta0)."""
    sigma_V = flow.params.kernel.sigma_V
    h = 1.0 / flow.steps
    bar_c = bar_c_path[flow.steps].copy()
    bar_b = bar_beta_path[flow.steps].copy()
    for i in range(flow.steps - 1, -1, -1):
        bar_c, bar_b = _state_step_vjp(
            flow.c_path[i], flow.beta_path[i], h, sigma_V, bar_c, bar_b
        )
        bar_c += bar_c_path[i]
        bar_b += bar_beta_path[i]
    return bar_c, bar_b


def _flow_points_vjp(flow, x_path, bar_x_end):
    """Backpropagate through the vertex RK4; returns cotangents for x0 and path states."""
    sigma_V = flow.params.kernel.sigma_V
    h = 1.0 / flow.steps
    n = flow.steps
    bar_c_path = np.zeros_like(flow.c_path)
    bar_b_path = np.zeros_like(flow.beta_path)
    bar_x = bar_x_end.copy()
    for i in range(n - 1, -1, -1):
        x = x_path[i]
        c0, b0 = flow.c_path[i], flow.beta_path[i]
        c1, b1 = flow.c_path[i + 1], flow.beta_path[i + 1]
        cm, bm = 0.5 * (c0 + c1), 0.5 * (b0 + b1)
        k1 = convolve(x, c0, b0, sigma_V)
        x2 = x + 0.5 * h * k1
        k2 = convolve(x2, cm, bm, sigma_V)
        x3 = x + 0.5 * h * k2
        k3 = convolve(x3, cm, bm, sigma_V)
        x4 = x + h * k3

        bar_next = bar_x
        bar_x = bar_next.copy()
        bk1 = (h / 6.0) * bar_next
        bk2 = (h / 3.0) * bar_next
        bk3 = (h / 3.0) * bar_next
        bk4 = (h / 6.0) * bar_next
        bar_cm = np.zeros_like(c0)
        bar_bm = np.zeros_like(b0)

        bt, bc, bv = convolve_vjp(x4, c1, b1, sigma_V, bk4)
        bar_x += bt
        bk3 += h * bt
        bar_c_path[i + 1] += bc
        bar_b_path[i + 1] += bv

        bt, bc, bv = convolve_vjp(x3, cm, bm, sigma_V, bk3)
        bar_x += bt
        bk2 += 0.5 * h * bt
        bar_cm += bc
        bar_bm += bv

        bt, bc, bv = convolve_vjp(x2, cm, bm, sigma_V, bk2)
        bar_x += bt
        bk1 += 0.5 * h * bt
        bar_cm += bc
        bar_bm += bv

        bt, bc, bv = convolve_vjp(x, c0, b0, sigma_V, bk1)
        bar_x += bt
        bar_c_path[i] += bc
        bar_b_path[i] += bv

        bar_c_path[i] += 0.5 * bar_cm
        bar_c_path[i + 1] += 0.5 * bar_cm
        bar_b_path[i] += 0.5 * bar_bm
        bar_b_path[i + 1] += 0.5 * bar_bm
    return bar_x, bar_c_path, bar_b_path


def _hamiltonian_grads(c, beta, sigma_V):
    """(dH/dc, dH/dbeta) of the kinetic energy."""
    K = gram(c, c, sigma_V)
    dH_dbeta = K @ beta
    _, beta_dot = hamiltonian_field(c, beta, sigma_V)
    return -beta_dot, dH_dbeta


# ---------------------------------------------------------------------------
# Objective and gradient
# ---------------------------------------------------------------------------

def _make_attachments(template, observations, sigma_W):
    return [VarifoldAttachment(template, obs.shape, sigma_W) for obs in observations]


def objective(template, params, observations, t_ref, config, attachments=None):
    """Objective value and per-observation residuals."""
    if len(observations) < 1:
        raise InvalidInputError("need at least one observation")
    if attachments is None:
        attachments = _make_attachments(template, observations, config.kernel.sigma_W)
    x0 = template.concat_vertices()
    residuals = np.empty(len(observations))
    for j, (obs, att) in enumerate(zip(observations, attachments)):
        dt = obs.t - t_ref
        if dt == 0.0:
            residuals[j] = att.value(x0)
        else:
            flow = shoot(params.scaled(dt), config.steps)
            residuals[j] = att.value(flow_points(flow, x0))
    reg = 2.0 * config.lambda_reg * hamiltonian(
        params.control_points, params.momenta, config.kernel.sigma_V
    )
    return float(residuals.sum() + reg), residuals


def objective_gradient(template, params, observations, t_ref, config, attachments=None):
    """Exact gradient of the discrete objective for every enabled block."""
    if len(observations) < 1:
        raise InvalidInputError("need at least one observation")
    if attachments is None:
        attachments = _make_attachments(template, observations, config.kernel.sigma_W)
    sigma_V = config.kernel.sigma_V
    c0, beta0 = params.control_points, params.momenta
    x0 = template.concat_vertices()

    bar_beta0 = np.zeros_like(beta0)
    bar_c0 = np.zeros_like(c0)
    bar_x0 = np.zeros_like(x0)

    for obs, att in zip(observations, attachments):
        dt = obs.t - t_ref
        if dt == 0.0:
            bar_x0 += att.gradient(x0)
            continue
        flow = shoot(params.scaled(dt), config.steps)
        x_end, x_path = flow_points(flow, x0, record_path=True)
        bar_x_end = att.gradient(x_end)
        bx0, bar_c_path, bar_b_path = _flow_points_vjp(flow, x_path, bar_x_end)
        bc, bb = _shoot_vjp(flow, bar_c_path, bar_b_path)
        bar_x0 += bx0
        bar_c0 += bc
        bar_beta0 += dt * bb

    dH_dc, dH_dbeta = _hamiltonian_grads(c0, beta0, sigma_V)
    bar_beta0 += 2.0 * config.lambda_reg * dH_dbeta
    bar_c0 += 2.0 * config.lambda_reg * dH_dc

    return Gradients(
        momenta=bar_beta0,
        control_points=bar_c0 if config.optimize_control_points else None,
        template=bar_x0 if config.optimize_template else None,
    )


# ---------------------------------------------------------------------------
# Nesterov descent with step-halving line search
# ---------------------------------------------------------------------------

def _nesterov_minimize(value_fn, grad_fn, x0, config):
    """Monotone Nesterov descent: momentum (k-1)/(k+2), halve-and-restart on increase."""
    x = x0.copy()
    x_prev = x0.copy()
    f_x, extras = value_fn(x)
    history = [IterationRecord(0, f_x, 0.0, 0)]
    g0 = grad_fn(x)
    gmax = float(np.max(np.abs(g0))) if g0.size else 0.0
    if gmax == 0.0:
        return x, f_x, extras, history, True
    eta = config.initial_step / gmax
    eta_floor = eta * 1e-14
    k = 0
    converged = False
    for it in range(1, config.max_iters + 1):
        mu = (k - 1.0) / (k + 2.0) if k >= 1 else 0.0
        y = x + mu * (x - x_prev)
        g = grad_fn(y)
        halvings = 0
        restarted = mu == 0.0
        while True:
            cand = y - eta * g
            f_cand, cand_extras = value_fn(cand)
            if np.isfinite(f_cand) and f_cand <= f_x:
                break
            eta *= 0.5
            halvings += 1
            k = 0
            if not restarted:  # momentum restart: plain gradient step from x
                y = x
                g = grad_fn(x)
                restarted = True
            if halvings > config.max_halvings or eta < eta_floor:
                return x, f_x, extras, history, converged
        decrease = f_x - f_cand
        x_prev, x = x, cand
        f_x, extras = f_cand, cand_extras
        k += 1
        if halvings == 0:
            eta *= config.step_growth
        history.append(IterationRecord(it, f_x, eta, halvings))
        if decrease <= config.tol * max(abs(f_x), 1e-12):
            converged = True
            break
    return x, f_x, extras, history, converged


def _pack(beta, c, x, config):
    parts = [beta.ravel()]
    if config.optimize_control_points:
        parts.append(c.ravel())
    if config.optimize_template:
        parts.append(x.ravel())
    return np.concatenate(parts)


def _unpack(vec, n_cp, n_verts, config, c_fixed, x_fixed):
    beta = vec[: 3 * n_cp].reshape(n_cp, 3)
    k = 3 * n_cp
    if config.optimize_control_points:
        c = vec[k: k + 3 * n_cp].reshape(n_cp, 3)
        k += 3 * n_cp
    else:
        c = c_fixed
    if config.optimize_template:
        x = vec[k: k + 3 * n_verts].reshape(n_verts, 3)
    else:
        x = x_fixed
    return beta, c, x


def _fit(template0, control_points, observations, t_ref, config):
    """Shared descent core for register and regress."""
    c_fixed = np.asarray(control_points, dtype=float)
    x_fixed = template0.concat_vertices()
    n_cp, n_verts = len(c_fixed), len(x_fixed)
    atts = _make_attachments(template0, observations, config.kernel.sigma_W)

    def value_fn(vec):
        beta, c, x = _unpack(vec, n_cp, n_verts, config, c_fixed, x_fixed)
        template = template0.with_concat_vertices(x)
        params = DeformationParams(c, beta, config.kernel)
        return objective(template, params, observations, t_ref, config, attachments=atts)

    def grad_fn(vec):
        beta, c, x = _unpack(vec, n_cp, n_verts, config, c_fixed, x_fixed)
        template = template0.with_concat_vertices(x)
        params = DeformationParams(c, beta, config.kernel)
        g = objective_gradient(template, params, observations, t_ref, config,
                               attachments=atts)
        return _pack(
            g.momenta,
            g.control_points if g.control_points is not None else c_fixed,
            g.template if g.template is not None else x_fixed,
            config,
        )

    vec0 = _pack(np.zeros((n_cp, 3)), c_fixed, x_fixed, config)
    vec, f_final, residuals, history, converged = _nesterov_minimize(
        value_fn, grad_fn, vec0, config
    )
    beta, c, x = _unpack(vec, n_cp, n_verts, config, c_fixed, x_fixed)
    template = template0.with_concat_vertices(x)
    params = DeformationParams(c, beta, config.kernel)
    return template, params, f_final, residuals, history, converged


def control_grid(shape, spacing, pad=None):
    """Regular grid over the shape bounding box, anchored at the padded corner."""
    if spacing <= 0:
        raise InvalidInputError("control grid spacing must be positive")
    pad = spacing if pad is None else pad
    v = shape.concat_vertices()
    lo = v.min(axis=0) - pad
    hi = v.max(axis=0) + pad
    axes = [lo[d] + spacing * np.arange(int(np.floor((hi[d] - lo[d]) / spacing)) + 1)
            for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts


def _resolve_control_points(shape, config):
    if config.control_points is not None:
        return np.asarray(config.control_points, dtype=float)
    spacing = config.control_spacing or config.kernel.sigma_V
    return control_grid(shape, spacing)


def register(source, target, config=None):
    """Match source onto target: one observation at t_ref + 1, template fixed."""
    config = config or FitConfig()
    cfg = FitConfig(**{**config.__dict__, "optimize_template": False})
    control_points = _resolve_control_points(source, cfg)
    observations = [Observation(1.0, target)]
    _, params, f_final, residuals, history, converged = _fit(
        source, control_points, observations, t_ref=0.0, config=cfg
    )
    return RegistrationResult(
        params=params,
        final_objective=f_final,
        residual=float(residuals[0]),
        iterations=history,
        converged=converged,
    )


def regress(observations, config=None):
    """Geodesic regression: intercept (template) and per-year slope (c0, beta0)."""
    config = config or FitConfig()
    if len(observations) < 2:
        raise InvalidInputError("regression needs at least 2 observations")
    obs = sorted(observations, key=lambda o: o.t)
    if obs[0].t == obs[-1].t:
        raise InvalidInputError("observations must cover at least two distinct ages")
    t_ref = obs[0].t
    template0 = obs[0].shape
    control_points = _resolve_control_points(template0, config)
    template, params, f_final, residuals, history, converged = _fit(
        template0, control_points, obs, t_ref, config
    )
    geod = Geodesic(template=template, params=params, t_ref=t_ref,
                    span=(obs[0].t, obs[-1].t))
    return RegressionResult(
        geodesic=geod,
        final_objective=f_final,
        residuals=residuals,
        iterations=history,
        converged=converged,
    )


def extrapolate(result, t_future, steps=None):
    """Evaluate a fitted trajectory at any time, including beyond the span."""
    from .deformation import DEFAULT_STEPS, shape_at

    return shape_at(result.geodesic, t_future, steps or DEFAULT_STEPS)


def register_point_cloud(source_points, target_points, kernel, config=None):
    """Riemannian log between control-point configurations.

    Momenta sit at the source points themselves, so the flowed cloud is the
    control-point trajectory; the attachment is the Gaussian (sigma_W) cloud
    discrepancy.  Used by the Schild's-ladder transport oracle.
    """
    config = config or FitConfig(kernel=kernel, lambda_reg=1e-4, tol=1e-10,
                                 max_iters=300)
    source = np.asarray(source_points, dtype=float)
    attachment = CloudAttachment(target_points, kernel.sigma_W)
    n_cp = len(source)
    sigma_V = kernel.sigma_V

    def value_fn(vec):
        beta = vec.reshape(n_cp, 3)
        params = DeformationParams(source, beta, kernel)
        flow = shoot(params, config.steps)
        d = attachment.value(flow.c_path[-1])
        reg = 2.0 * config.lambda_reg * hamiltonian(source, beta, sigma_V)
        return d + reg, d

    def grad_fn(vec):
        beta = vec.reshape(n_cp, 3)
        params = DeformationParams(source, beta, kernel)
        flow = shoot(params, config.steps)
        bar_c_path = np.zeros_like(flow.c_path)
        bar_b_path = np.zeros_like(flow.beta_path)
        bar_c_path[-1] = attachment.gradient(flow.c_path[-1])
        _, bar_beta = _shoot_vjp(flow, bar_c_path, bar_b_path)
        _, dH_dbeta = _hamiltonian_grads(source, beta, sigma_V)
        return (bar_beta + 2.0 * config.lambda_reg * dH_dbeta).ravel()

    vec0 = np.zeros(3 * n_cp)
    vec, f_final, residual, history, converged = _nesterov_minimize(
        value_fn, grad_fn, vec0, config
    )
    return RegistrationResult(
        params=DeformationParams(source, vec.reshape(n_cp, 3), kernel),
        final_objective=f_final,
        residual=float(residual),
        iterations=history,
        converged=converged,
    )
