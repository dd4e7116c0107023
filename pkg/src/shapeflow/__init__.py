"""Longitudinal shape-trajectory engine.

Fits geodesics to time series of triangle meshes, transfers them between
subjects by parallel transport, retimes them from scalar score dynamics, and
scores predictions with voxel Dice and Mann-Whitney statistics.
"""

from .kernels import KernelConfig
from .mesh import Mesh, ShapeComplex, dice, load_mesh, save_mesh
from .deformation import DeformationParams, Geodesic, shape_at, shoot
from .estimation import FitConfig, Observation, register, regress

__all__ = [
    "KernelConfig",
    "Mesh",
    "ShapeComplex",
    "dice",
    "load_mesh",
    "save_mesh",
    "DeformationParams",
    "Geodesic",
    "shape_at",
    "shoot",
    "FitConfig",
    "Observation",
    "register",
    "regress",
]

__version__ = "0.1.0"
