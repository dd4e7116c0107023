"""Geodesic shooting of control points/momenta and mesh flow.

The deformation is the kernel cotangent flow

    c_dot_k = sum_j K(c_k, c_j) beta_j
    beta_dot_k = -sum_j (beta_k . beta_j) grad_1 K(c_k, c_j)

integrated with RK4 over the unit interval.  Momenta are stored per year;
reaching time t means shooting (t - t_ref) * beta for unit time.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .kernels import KernelConfig, convolve, gram
from .mesh import ShapeComplex, load_mesh, save_mesh

DEFAULT_STEPS = 20


@dataclass(frozen=True)
class DeformationParams:
    """Initial control points c0 (P, 3), momenta beta0 (P, 3) and kernel widths."""

    control_points: np.ndarray
    momenta: np.ndarray
    kernel: KernelConfig

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.control_points, dtype=float))
        b = np.ascontiguousarray(np.asarray(self.momenta, dtype=float))
        if c.ndim != 2 or c.shape[1] != 3 or len(c) < 1:
            raise InvalidInputError(f"control_points must be (P>=1, 3), got {c.shape}")
        if b.shape != c.shape:
            raise InvalidInputError(
                f"momenta shape {b.shape} != control points shape {c.shape}"
            )
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(b))):
            raise InvalidInputError("non-finite control points or momenta")
        object.__setattr__(self, "control_points", c)
        object.__setattr__(self, "momenta", b)

    def scaled(self, factor):
        return DeformationParams(self.control_points, factor * self.momenta, self.kernel)

    def to_dict(self):
        return {
            "control_points": self.control_points.tolist(),
            "momenta": self.momenta.tolist(),
            "sigma_V": self.kernel.sigma_V,
            "sigma_W": self.kernel.sigma_W,
        }

    @classmethod
    def from_dict(cls, d):
        kernel = KernelConfig(sigma_V=float(d["sigma_V"]),
                              sigma_W=float(d.get("sigma_W", 3.0)))
        return cls(np.asarray(d["control_points"], dtype=float),
                   np.asarray(d["momenta"], dtype=float), kernel)


@dataclass(frozen=True)
class GeodesicFlow:
    """Discretized Hamiltonian trajectory over s in [0, 1]."""

    params: DeformationParams
    steps: int
    c_path: np.ndarray      # (steps+1, P, 3)
    beta_path: np.ndarray   # (steps+1, P, 3)

    @property
    def path(self):
        return list(zip(self.c_path, self.beta_path))

    def end_state(self):
        return self.c_path[-1], self.beta_path[-1]


@dataclass(frozen=True)
class Geodesic:
    """Fitted trajectory: template at t_ref, per-year slope, fitted time span."""

    template: ShapeComplex
    params: DeformationParams
    t_ref: float
    span: tuple

    def __post_init__(self):
        t_min, t_max = self.span
        if not (t_min <= self.t_ref <= t_max):
            raise InvalidInputError(
                f"t_ref {self.t_ref} outside span [{t_min}, {t_max}]"
            )


def hamiltonian(control_points, momenta, sigma_V):
    """Kinetic energy 0.5 sum_ij beta_i . beta_j K(c_i, c_j)."""
    c = np.asarray(control_points, dtype=float)
    b = np.asarray(momenta, dtype=float)
    K = gram(c, c, sigma_V)
    return 0.5 * float(np.einsum("ij,id,jd->", K, b, b))


def hamiltonian_field(c, beta, sigma_V):
    """Right-hand side (c_dot, beta_dot) of the Hamiltonian system."""
    K = gram(c, c, sigma_V)
    c_dot = K @ beta
    A = (2.0 / sigma_V**2) * K * (beta @ beta.T)
    beta_dot = A.sum(axis=1)[:, None] * c - A @ c
    return c_dot, beta_dot


def _rk4_state_step(c, beta, h, sigma_V):
    k1c, k1b = hamiltonian_field(c, beta, sigma_V)
    k2c, k2b = hamiltonian_field(c + 0.5 * h * k1c, beta + 0.5 * h * k1b, sigma_V)
    k3c, k3b = hamiltonian_field(c + 0.5 * h * k2c, beta + 0.5 * h * k2b, sigma_V)
    k4c, k4b = hamiltonian_field(c + h * k3c, beta + h * k3b, sigma_V)
    c_next = c + (h / 6.0) * (k1c + 2 * k2c + 2 * k3c + k4c)
    beta_next = beta + (h / 6.0) * (k1b + 2 * k2b + 2 * k3b + k4b)
    return c_next, beta_next


def shoot(params, steps=DEFAULT_STEPS):
    """Integrate the Hamiltonian system from (c0, beta0) over s in [0, 1]."""
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}")
    sigma_V = params.kernel.sigma_V
    P = len(params.control_points)
    c_path = np.empty((steps + 1, P, 3))
    beta_path = np.empty((steps + 1, P, 3))
    c_path[0] = params.control_points
    beta_path[0] = params.momenta
    h = 1.0 / steps
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(steps):
            c_path[i + 1], beta_path[i + 1] = _rk4_state_step(
                c_path[i], beta_path[i], h, sigma_V
            )
            if not (np.all(np.isfinite(c_path[i + 1]))
                    and np.all(np.isfinite(beta_path[i + 1]))):
                raise DivergenceError("non-finite state in geodesic shooting",
                                      step=i + 1)
    return GeodesicFlow(params=params, steps=steps, c_path=c_path, beta_path=beta_path)


def flow_points(flow, points, record_path=False):
    """Advect points through the time-varying velocity field of a stored flow.

    RK4 per stored step; control states at half-steps are linear interpolations
    of the two surrounding path states.
    """
    sigma_V = flow.params.kernel.sigma_V
    x = np.asarray(points, dtype=float).copy()
    h = 1.0 / flow.steps
    path = np.empty((flow.steps + 1,) + x.shape) if record_path else None
    if record_path:
        path[0] = x
    for i in range(flow.steps):
        c0, b0 = flow.c_path[i], flow.beta_path[i]
        c1, b1 = flow.c_path[i + 1], flow.beta_path[i + 1]
        cm, bm = 0.5 * (c0 + c1), 0.5 * (b0 + b1)
        k1 = convolve(x, c0, b0, sigma_V)
        k2 = convolve(x + 0.5 * h * k1, cm, bm, sigma_V)
        k3 = convolve(x + 0.5 * h * k2, cm, bm, sigma_V)
        k4 = convolve(x + h * k3, c1, b1, sigma_V)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite vertex state in flow", step=i + 1)
        if record_path:
            path[i + 1] = x
    return (x, path) if record_path else x


def flow_shape(flow, shape):
    """Deform every structure of a complex along the flow; connectivity unchanged."""
    return shape.with_concat_vertices(flow_points(flow, shape.concat_vertices()))


def shape_at(geodesic, t, steps=DEFAULT_STEPS):
    """Shape on the trajectory at time t (extrapolates outside the span)."""
    dt = t - geodesic.t_ref
    if dt == 0.0:
        return geodesic.template
    flow = shoot(geodesic.params.scaled(dt), steps)
    return flow_shape(flow, geodesic.template)


def state_at(geodesic, t, steps=DEFAULT_STEPS):
    """Control points and per-year momenta carried to time t along the trajectory."""
    dt = t - geodesic.t_ref
    if dt == 0.0:
        return geodesic.params.control_points.copy(), geodesic.params.momenta.copy()
    flow = shoot(geodesic.params.scaled(dt), steps)
    c_end, beta_end = flow.end_state()
    return c_end, beta_end / dt


# ---------------------------------------------------------------------------
# On-disk representation
# ---------------------------------------------------------------------------

def save_params(params, path):
    with open(path, "w") as f:
        json.dump(params.to_dict(), f, indent=2, sort_keys=True)


def load_params(path):
    with open(path) as f:
        return DeformationParams.from_dict(json.load(f))


def save_geodesic(geodesic, directory):
    """Write geodesic.json plus one template VTK per structure."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    template_entries = []
    for mesh in geodesic.template:
        name = f"template_{mesh.label}.vtk"
        save_mesh(mesh, directory / name)
        template_entries.append({"label": mesh.label, "path": name})
    doc = geodesic.params.to_dict()
    doc.update({
        "t_ref": geodesic.t_ref,
        "span": list(geodesic.span),
        "template": template_entries,
    })
    with open(directory / "geodesic.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    return directory / "geodesic.json"


def load_geodesic(path):
    path = Path(path)
    if path.is_dir():
        path = path / "geodesic.json"
    with open(path) as f:
        doc = json.load(f)
    meshes = tuple(
        load_mesh(path.parent / entry["path"], label=entry["label"])
        for entry in doc["template"]
    )
    return Geodesic(
        template=ShapeComplex(meshes),
        params=DeformationParams.from_dict(doc),
        t_ref=float(doc["t_ref"]),
        span=(float(doc["span"][0]), float(doc["span"][1])),
    )
