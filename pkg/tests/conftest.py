import numpy as np
import pytest

from shapeflow.kernels import KernelConfig
from shapeflow.mesh import Mesh, ShapeComplex, make_icosphere, single


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def kernel():
    return KernelConfig(sigma_V=5.0, sigma_W=3.0)


@pytest.fixture
def triangle_pair(rng):
    """Two small random two-triangle meshes with matching labels."""
    def make(seed_shift=0):
        r = np.random.default_rng(100 + seed_shift)
        return Mesh(r.normal(0, 2, (4, 3)), np.array([[0, 1, 2], [1, 3, 2]]), "patch")
    return make(0), make(1)


@pytest.fixture
def sphere_complex():
    return ShapeComplex((
        make_icosphere(6.0, (-8.0, 0.0, 0.0), 2, "left_hippocampus"),
        make_icosphere(5.0, (8.0, 0.0, 0.0), 2, "right_hippocampus"),
    ))


@pytest.fixture
def small_sphere():
    return single(make_icosphere(5.0, (0.0, 0.0, 0.0), 2, "ball"))
