"""Triangle-mesh data model: varifold metric, voxel Dice, VTK I/O.

Meshes are immutable-by-convention numpy containers in millimeter coordinates.
The varifold inner product compares meshes without point correspondence; Dice
is computed on voxel occupancy grids (center-inside rule, parity of +x ray
crossings).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, MeshParseError, ValidationError
from .kernels import gram

_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class Mesh:
    """Triangle surface: vertices (V, 3) float, triangles (F, 3) int, label."""

    vertices: np.ndarray
    triangles: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValidationError(f"triangles must be (F, 3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite vertex coordinates")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValidationError(
                f"triangle index out of range [0, {len(v)}): min {t.min()}, max {t.max()}"
            )
        degen = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        if np.any(degen):
            raise ValidationError(
                f"triangles with repeated vertex indices: {np.nonzero(degen)[0][:8].tolist()}"
            )
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.triangles)

    def with_vertices(self, vertices):
        """Same connectivity and label, new vertex positions."""
        return Mesh(vertices=np.asarray(vertices, dtype=float),
                    triangles=self.triangles, label=self.label)

    def translated(self, delta):
        return self.with_vertices(self.vertices + np.asarray(delta, dtype=float))


@dataclass(frozen=True)
class ShapeComplex:
    """Ordered multi-structure observation: one labelled mesh per structure."""

    meshes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        meshes = tuple(self.meshes)
        labels = [m.label for m in meshes]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate structure labels: {labels}")
        object.__setattr__(self, "meshes", meshes)

    @property
    def labels(self):
        return tuple(m.label for m in self.meshes)

    def __iter__(self):
        return iter(self.meshes)

    def __len__(self):
        return len(self.meshes)

    def get(self, label):
        for m in self.meshes:
            if m.label == label:
                return m
        raise KeyError(label)

    def concat_vertices(self):
        """All structure vertices stacked into one (V_total, 3) array."""
        return np.concatenate([m.vertices for m in self.meshes], axis=0)

    def with_concat_vertices(self, vertices):
        """Rebuild the complex from a stacked vertex array (same connectivity)."""
        out, k = [], 0
        for m in self.meshes:
            out.append(m.with_vertices(vertices[k:k + m.n_vertices]))
            k += m.n_vertices
        if k != len(vertices):
            raise InvalidInputError(f"vertex count mismatch: {len(vertices)} vs {k}")
        return ShapeComplex(tuple(out))

    def translated(self, delta):
        return ShapeComplex(tuple(m.translated(delta) for m in self.meshes))


def single(mesh):
    """Wrap one mesh as a one-structure complex."""
    return ShapeComplex((mesh,))


# ---------------------------------------------------------------------------
# VTK legacy ASCII POLYDATA I/O
# ---------------------------------------------------------------------------

def save_mesh(mesh, path):
    """Write ASCII VTK legacy POLYDATA with triangular faces."""
    lines = [
        "# vtk DataFile Version 3.0",
        mesh.label or "mesh",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {mesh.n_vertices} float",
    ]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    lines.append(f"POLYGONS {mesh.n_faces} {4 * mesh.n_faces}")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path, label=None):
    """Read an ASCII VTK legacy POLYDATA file written by save_mesh (or compatible)."""
    with open(path) as f:
        raw = f.read().splitlines()

    def fail(msg, line_no):
        raise MeshParseError(msg, path=str(path), line=line_no)

    if not raw or not raw[0].startswith("# vtk DataFile"):
        fail("missing VTK DataFile header", 1)
    if len(raw) < 4:
        fail("truncated header", len(raw))
    title = raw[1].strip()
    if raw[2].strip().upper() != "ASCII":
        fail(f"unsupported encoding {raw[2].strip()!r}", 3)
    if raw[3].strip().upper() != "DATASET POLYDATA":
        fail(f"expected DATASET POLYDATA, got {raw[3].strip()!r}", 4)

    i = 4
    n_lines = len(raw)
    while i < n_lines and not raw[i].strip():
        i += 1
    if i >= n_lines or not raw[i].split():
        fail("missing POINTS section", min(i + 1, n_lines))
    head = raw[i].split()
    if head[0].upper() != "POINTS":
        fail(f"expected POINTS, got {head[0]!r}", i + 1)
    try:
        n_points = int(head[1])
    except (IndexError, ValueError):
        fail("malformed POINTS header", i + 1)
    i += 1

    coords = []
    while i < n_lines and len(coords) < 3 * n_points:
        parts = raw[i].split()
        if parts and parts[0].upper() == "POLYGONS":
            break
        for p in parts:
            try:
                coords.append(float(p))
            except ValueError:
                fail(f"bad coordinate {p!r}", i + 1)
        i += 1
    if len(coords) != 3 * n_points:
        fail(f"expected {3 * n_points} coordinates, got {len(coords)}", i)
    vertices = np.array(coords, dtype=float).reshape(n_points, 3)

    while i < n_lines and not raw[i].strip():
        i += 1
    if i >= n_lines:
        fail("missing POLYGONS section", n_lines)
    head = raw[i].split()
    if head[0].upper() != "POLYGONS":
        fail(f"expected POLYGONS, got {head[0]!r}", i + 1)
    try:
        n_faces = int(head[1])
    except (IndexError, ValueError):
        fail("malformed POLYGONS header", i + 1)
    i += 1

    triangles = []
    while i < n_lines and len(triangles) < n_faces:
        parts = raw[i].split()
        if parts:
            if parts[0] != "3" or len(parts) != 4:
                fail(f"only 3-index faces supported, got {raw[i].strip()!r}", i + 1)
            triangles.append([int(parts[1]), int(parts[2]), int(parts[3])])
        i += 1
    if len(triangles) != n_faces:
        fail(f"expected {n_faces} faces, got {len(triangles)}", i)

    return Mesh(vertices=vertices,
                triangles=np.array(triangles, dtype=np.int64).reshape(n_faces, 3),
                label=title if label is None else label)


# ---------------------------------------------------------------------------
# Face geometry and varifold metric
# ---------------------------------------------------------------------------

def face_centroids_normals(mesh):
    """Per-face centroid and area-weighted normal n = 0.5 (v1-v0) x (v2-v0)."""
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    centroids = (v0 + v1 + v2) / 3.0
    normals = 0.5 * np.cross(v1 - v0, v2 - v0)
    return centroids, normals


def varifold_cross(centroids_a, normals_a, centroids_b, normals_b, sigma_W):
    """Full varifold cross term sum_fg K(c_f, c_g) (n_f.n_g)^2 / (|n_f||n_g|).

    Degenerate (zero-area) faces contribute nothing.
    """
    na = np.linalg.norm(normals_a, axis=1)
    nb = np.linalg.norm(normals_b, axis=1)
    ok_a = na > _DEGENERATE_NORM
    ok_b = nb > _DEGENERATE_NORM
    if not (np.all(ok_a) and np.all(ok_b)):
        warnings.warn("zero-area faces ignored in varifold term", RuntimeWarning)
    ca, va, na = centroids_a[ok_a], normals_a[ok_a], na[ok_a]
    cb, vb, nb = centroids_b[ok_b], normals_b[ok_b], nb[ok_b]
    if len(ca) == 0 or len(cb) == 0:
        return 0.0
    w = gram(ca, cb, sigma_W)
    dots = va @ vb.T
    w *= dots
    w *= dots
    w *= (1.0 / na)[:, None]
    w *= (1.0 / nb)[None, :]
    return float(w.sum())


def varifold_inner(a, b, sigma_W):
    """Varifold inner product between two meshes (orientation-blind)."""
    ca, va = face_centroids_normals(a)
    cb, vb = face_centroids_normals(b)
    return varifold_cross(ca, va, cb, vb, sigma_W)


def varifold_distance2(a, b, sigma_W):
    """Squared varifold distance |A|^2 - 2<A,B> + |B|^2, clamped at zero."""
    d2 = (varifold_inner(a, a, sigma_W)
          - 2.0 * varifold_inner(a, b, sigma_W)
          + varifold_inner(b, b, sigma_W))
    if d2 < -1e-9:
        raise ValidationError(f"varifold distance^2 is {d2}, below -1e-9")
    return max(d2, 0.0)


def complex_varifold_distance2(a, b, sigma_W):
    """Label-wise sum of squared varifold distances between two complexes."""
    if a.labels != b.labels:
        raise InvalidInputError(f"label mismatch: {a.labels} vs {b.labels}")
    return sum(varifold_distance2(ma, mb, sigma_W) for ma, mb in zip(a, b))


def varifold_cross_gradient(ca, va, cb, vb, sigma_W):
    """d<A,B>/d(centroids_a), d<A,B>/d(normals_a); zero rows for degenerate faces."""
    na = np.linalg.norm(va, axis=1)
    nb = np.linalg.norm(vb, axis=1)
    ok_a = na > _DEGENERATE_NORM
    ok_b = nb > _DEGENERATE_NORM
    bar_c = np.zeros_like(ca)
    bar_n = np.zeros_like(va)
    if not np.any(ok_a) or not np.any(ok_b):
        return bar_c, bar_n
    cA, vA, nA = ca[ok_a], va[ok_a], na[ok_a]
    cB, vB, nB = cb[ok_b], vb[ok_b], nb[ok_b]
    ia, ib = 1.0 / nA, 1.0 / nB
    K = gram(cA, cB, sigma_W)
    dots = vA @ vB.T
    q = K * dots
    q *= ia[:, None]
    q *= ib[None, :]          # K dots / (|n_a||n_b|)
    w = q * dots              # K dots^2 / (|n_a||n_b|)
    bar_c[ok_a] = (-2.0 / sigma_W**2) * (w.sum(axis=1)[:, None] * cA - w @ cB)
    coef2_sum = ia**2 * w.sum(axis=1)
    bar_n[ok_a] = 2.0 * (q @ vB) - coef2_sum[:, None] * vA
    return bar_c, bar_n


def normals_to_vertex_gradient(mesh, bar_c, bar_n):
    """Push centroid/normal cotangents back to vertex positions."""
    tri = mesh.triangles
    v0 = mesh.vertices[tri[:, 0]]
    v1 = mesh.vertices[tri[:, 1]]
    v2 = mesh.vertices[tri[:, 2]]
    bar_a = 0.5 * np.cross(v2 - v0, bar_n)   # d(n.g)/d(v1-v0) = 0.5 b x g
    bar_b = 0.5 * np.cross(bar_n, v1 - v0)   # d(n.g)/d(v2-v0) = 0.5 g x a
    grad = np.zeros_like(mesh.vertices)
    third = bar_c / 3.0
    np.add.at(grad, tri[:, 0], third - bar_a - bar_b)
    np.add.at(grad, tri[:, 1], third + bar_a)
    np.add.at(grad, tri[:, 2], third + bar_b)
    return grad


def varifold_distance2_gradient(a, b, sigma_W):
    """Gradient of varifold_distance2(a, b) with respect to a's vertices."""
    ca, va = face_centroids_normals(a)
    cb, vb = face_centroids_normals(b)
    # d/da <A,A> = 2 x one-slot gradient; d/da (-2 <A,B>) = -2 x one-slot
    bar_c_self, bar_n_self = varifold_cross_gradient(ca, va, ca, va, sigma_W)
    bar_c_x, bar_n_x = varifold_cross_gradient(ca, va, cb, vb, sigma_W)
    bar_c = 2.0 * bar_c_self - 2.0 * bar_c_x
    bar_n = 2.0 * bar_n_self - 2.0 * bar_n_x
    return normals_to_vertex_gradient(a, bar_c, bar_n)


# ---------------------------------------------------------------------------
# Voxelization and Dice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean voxel grid; a cell is occupied iff its center lies inside the mesh."""

    origin: np.ndarray            # (3,) lower corner in mm
    voxel_size: float
    occupied: np.ndarray          # (nx, ny, nz) bool

    @property
    def count(self):
        return int(self.occupied.sum())

    @property
    def volume(self):
        return self.count * self.voxel_size**3


def find_open_edges(mesh):
    """Directed edges whose reverse is missing; empty for watertight meshes."""
    tri = mesh.triangles
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0)
    seen = {}
    for i, j in edges:
        seen[(int(i), int(j))] = seen.get((int(i), int(j)), 0) + 1
    open_edges = []
    for (i, j), n in seen.items():
        if n != 1 or seen.get((j, i), 0) != 1:
            open_edges.append((i, j))
    return open_edges


def voxelize(mesh, voxel_size, bounds):
    """Occupancy grid of a closed mesh on the given bounds.

    Parity of +x ray crossings at each voxel center decides inside/outside;
    a fixed sub-voxel offset of the ray grid breaks grazing hits
    deterministically.
    """
    if voxel_size <= 0:
        raise InvalidInputError(f"voxel_size must be positive, got {voxel_size}")
    open_edges = find_open_edges(mesh)
    if open_edges:
        raise ValidationError(
            f"mesh {mesh.label!r} is not watertight; open edges: {open_edges[:10]}"
        )
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    n = np.maximum(1, np.ceil((hi - lo) / voxel_size - 1e-12).astype(int))
    nx, ny, nz = int(n[0]), int(n[1]), int(n[2])

    eps_y = 1e-6 * voxel_size
    eps_z = 1.6180339887e-6 * voxel_size
    yc = lo[1] + (np.arange(ny) + 0.5) * voxel_size + eps_y
    zc = lo[2] + (np.arange(nz) + 0.5) * voxel_size + eps_z

    # crossing-count difference array: toggles[iy, iz, m] crossings whose x*
    # exceeds the first m x-centers
    toggles = np.zeros((ny, nz, nx + 1), dtype=np.int64)

    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    for a, b, c in zip(v0, v1, v2):
        ylo, yhi = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        zlo, zhi = min(a[2], b[2], c[2]), max(a[2], b[2], c[2])
        iy0 = int(np.searchsorted(yc, ylo, side="left"))
        iy1 = int(np.searchsorted(yc, yhi, side="right"))
        iz0 = int(np.searchsorted(zc, zlo, side="left"))
        iz1 = int(np.searchsorted(zc, zhi, side="right"))
        if iy0 >= iy1 or iz0 >= iz1:
            continue
        py, pz = np.meshgrid(yc[iy0:iy1], zc[iz0:iz1], indexing="ij")
        # 2D barycentric in the (y, z) projection
        d = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
        if abs(d) < 1e-300:
            continue  # edge-on face: the ray runs inside its plane
        l1 = ((py - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (pz - a[2])) / d
        l2 = ((b[1] - a[1]) * (pz - a[2]) - (py - a[1]) * (b[2] - a[2])) / d
        inside = (l1 > 0.0) & (l2 > 0.0) & (l1 + l2 < 1.0)
        if not np.any(inside):
            continue
        x_star = a[0] + l1[inside] * (b[0] - a[0]) + l2[inside] * (c[0] - a[0])
        m = np.floor((x_star - lo[0]) / voxel_size + 0.5).astype(int)
        m = np.clip(m, 0, nx)
        iy_idx, iz_idx = np.nonzero(inside)
        np.add.at(toggles, (iy_idx + iy0, iz_idx + iz0, m), 1)

    # counts[iy, iz, i] = crossings with x* beyond center i = suffix sum over m > i
    suffix = np.flip(np.cumsum(np.flip(toggles, axis=-1), axis=-1), axis=-1)
    counts = suffix[:, :, 1:]
    occupied = np.transpose(counts % 2 == 1, (2, 0, 1)).copy()
    return OccupancyGrid(origin=lo, voxel_size=float(voxel_size), occupied=occupied)


def _pair_bounds(a, b, voxel_size, pad_voxels=2):
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    pad = pad_voxels * voxel_size
    return lo - pad, hi + pad


def dice(a, b, voxel_size=1.0):
    """Volumetric Dice over corresponding structures of two complexes.

    2 * sum of per-label intersection volumes over the sum of all volumes;
    each label pair shares one grid anchored to their union bounding box.
    """
    if a.labels != b.labels:
        raise InvalidInputError(f"label mismatch: {a.labels} vs {b.labels}")
    inter = 0
    total = 0
    for ma, mb in zip(a, b):
        bounds = _pair_bounds(ma, mb, voxel_size)
        ga = voxelize(ma, voxel_size, bounds)
        gb = voxelize(mb, voxel_size, bounds)
        inter += int(np.sum(ga.occupied & gb.occupied))
        total += ga.count + gb.count
    if total == 0:
        raise InvalidInputError("both complexes voxelize to empty grids")
    return 2.0 * inter / total


# ---------------------------------------------------------------------------
# Primitive generators (simulator and test geometry)
# ---------------------------------------------------------------------------

def make_box(lo, hi, label="box"):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    vertices = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    triangles = np.array([
        [0, 2, 1], [0, 3, 2],          # bottom, -z
        [4, 5, 6], [4, 6, 7],          # top, +z
        [0, 1, 5], [0, 5, 4],          # front, -y
        [3, 6, 2], [3, 7, 6],          # back, +y
        [0, 4, 7], [0, 7, 3],          # left, -x
        [1, 2, 6], [1, 6, 5],          # right, +x
    ])
    return Mesh(vertices=vertices, triangles=triangles, label=label)


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=float)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def make_icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdivisions=2, label="sphere"):
    """Unit icosahedron subdivided and projected onto a sphere."""
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for i, j, k in faces:
            a, b, c = mid(i, j), mid(j, k), mid(k, i)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
    vertices = np.array(verts) * radius + np.asarray(center, dtype=float)
    return Mesh(vertices=vertices, triangles=np.array(faces, dtype=np.int64), label=label)
