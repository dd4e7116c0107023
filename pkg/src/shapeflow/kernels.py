"""Gaussian reproducing-kernel primitives.

Convention used throughout the package: K(x, y) = exp(-|x - y|^2 / sigma^2),
no factor 2 in the denominator.  All geometry is double precision.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class KernelConfig:
    """Kernel widths in mm: sigma_V drives deformations, sigma_W compares meshes."""

    sigma_V: float = 5.0
    sigma_W: float = 3.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma_V) and self.sigma_V > 0):
            raise InvalidInputError(f"sigma_V must be positive, got {self.sigma_V}")
        if not (np.isfinite(self.sigma_W) and self.sigma_W > 0):
            raise InvalidInputError(f"sigma_W must be positive, got {self.sigma_W}")


def eval_kernel(x, y, sigma):
    """Scalar kernel value between two points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite coordinates")
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    d2 = np.sum((x - y) ** 2)
    return float(np.exp(-d2 / sigma**2))


def _sq_dists(a, b):
    """Pairwise squared distances via norm expansion; clamped at 0 against rounding."""
    d2 = a @ b.T
    d2 *= -2.0
    d2 += np.einsum("ij,ij->i", a, a)[:, None]
    d2 += np.einsum("ij,ij->i", b, b)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def gram(a, b, sigma):
    """Kernel matrix K[i, j] = K(a_i, b_j), shape (len(a), len(b))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.exp(-_sq_dists(a, b) / sigma**2)


def _check_conv_args(centers, vectors):
    if len(centers) != len(vectors):
        raise InvalidInputError(
            f"centers/vectors length mismatch: {len(centers)} vs {len(vectors)}"
        )
    if len(centers) == 0:
        raise InvalidInputError("need at least one center")


def convolve(targets, centers, vectors, sigma):
    """Evaluate v(x_i) = sum_k K(x_i, c_k) beta_k for every target.

    Returns an array of shape (len(targets), 3).
    """
    targets = np.asarray(targets, dtype=float)
    centers = np.asarray(centers, dtype=float)
    vectors = np.asarray(vectors, dtype=float)
    _check_conv_args(centers, vectors)
    return gram(targets, centers, sigma) @ vectors


def convolve_gradient(targets, centers, vectors, sigma):
    """Jacobian dv/dx of the convolved field at each target.

    Returns shape (len(targets), 3, 3); entry [i, a, b] = d v_a / d x_b at x_i.
    """
    targets = np.asarray(targets, dtype=float)
    centers = np.asarray(centers, dtype=float)
    vectors = np.asarray(vectors, dtype=float)
    _check_conv_args(centers, vectors)
    diff = targets[:, None, :] - centers[None, :, :]          # (T, P, 3)
    K = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / sigma**2)
    # d/dx_b K(x, c_k) = -2 (x - c_k)_b / sigma^2 * K
    coef = (-2.0 / sigma**2) * K                               # (T, P)
    return np.einsum("ik,ka,ikb->iab", coef, vectors, diff)


def convolve_vjp(targets, centers, vectors, sigma, cotangent):
    """Vector-Jacobian product of convolve.

    Given cotangent g (same shape as convolve's output), returns gradients of
    sum_i g_i . v(x_i) with respect to (targets, centers, vectors).
    """
    targets = np.asarray(targets, dtype=float)
    centers = np.asarray(centers, dtype=float)
    vectors = np.asarray(vectors, dtype=float)
    g = np.asarray(cotangent, dtype=float)
    K = gram(targets, centers, sigma)

    bar_vectors = K.T @ g
    # scalar weight per (target, center): (g_i . beta_k) * K * (-2/sigma^2)
    w = (g @ vectors.T) * K * (-2.0 / sigma**2)
    # sum_k w_ik (x_i - c_k) and its negative, without the (T, P, 3) tensor
    bar_targets = w.sum(axis=1)[:, None] * targets - w @ centers
    bar_centers = w.sum(axis=0)[:, None] * centers - w.T @ targets
    return bar_targets, bar_centers, bar_vectors


def cloud_distance2(points, reference, sigma):
    """Kernel discrepancy between two point clouds seen as sums of unit masses.

    D = sum_ij K(x_i, x_j) - 2 sum_ij K(x_i, y_j) + sum_ij K(y_i, y_j).
    """
    points = np.asarray(points, dtype=float)
    reference = np.asarray(reference, dtype=float)
    xx = gram(points, points, sigma).sum()
    xy = gram(points, reference, sigma).sum()
    yy = gram(reference, reference, sigma).sum()
    return float(xx - 2.0 * xy + yy)


def cloud_distance2_gradient(points, reference, sigma):
    """Gradient of cloud_distance2 with respect to the first cloud."""
    points = np.asarray(points, dtype=float)
    reference = np.asarray(reference, dtype=float)
    Kxx = gram(points, points, sigma)
    Kxy = gram(points, reference, sigma)
    c = -2.0 / sigma**2
    # both slots of the xx term contribute; diagonal gradient vanishes
    g = 2.0 * c * (Kxx.sum(axis=1)[:, None] * points - Kxx @ points)
    g -= 2.0 * c * (Kxy.sum(axis=1)[:, None] * points - Kxy @ reference)
    return g
