"""Point clouds, rigid transforms and the small geometric toolkit the rest of
the package builds on.

All arrays are float64 numpy arrays. Clouds and transforms are immutable:
their arrays are copied on construction and flagged read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

from .errors import DegenerateError, ValidationError

__all__ = [
    "PointCloud",
    "RigidTransform",
    "PinholeIntrinsics",
    "NeighborIndex",
    "NormalizationRecord",
    "apply_transform",
    "invert_transform",
    "compose_transforms",
    "estimate_normals",
    "diameter",
    "lift_depth",
    "project_to_depth",
    "sample_noise",
    "normalize_cloud",
    "random_rotation",
    "rotation_about_axis",
    "rotation_angle",
]


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with optional unit normals and optional per-point feature rows.

    ``normal_valid`` flags points whose normal came from a degenerate
    neighborhood; such points keep a placeholder unit normal but should be
    skipped by anything that reads local geometry.
    """

    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be N x 3, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("positions contain non-finite values")
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != (n, 3):
                raise ValidationError(f"normals must be {n} x 3, got {nrm.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if n and np.max(np.abs(lengths - 1.0)) > 1e-6:
                raise ValidationError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.features is not None:
            feat = _frozen(self.features)
            if feat.ndim != 2 or feat.shape[0] != n:
                raise ValidationError(f"features must have {n} rows, got {feat.shape}")
            object.__setattr__(self, "features", feat)
        if self.normal_valid is not None:
            valid = _frozen(self.normal_valid, dtype=bool)
            if valid.shape != (n,):
                raise ValidationError("normal_valid must have one entry per point")
            object.__setattr__(self, "normal_valid", valid)

    def __len__(self):
        return len(self.positions)

    def with_(self, **changes) -> "PointCloud":
        return replace(self, **changes)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            self.positions[index],
            None if self.normals is None else self.normals[index],
            None if self.features is None else self.features[index],
            None if self.normal_valid is None else self.normal_valid[index],
        )

    @property
    def centroid(self):
        return self.positions.mean(axis=0)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValidationError("transform contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose_transforms(self, other)

    def inverse(self) -> "RigidTransform":
        return invert_transform(self)


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")


class NeighborIndex:
    """Exact nearest-neighbour queries over a fixed point set (kd-tree)."""

    def __init__(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValidationError("NeighborIndex needs a non-empty N x 3 array")
        self.points = _frozen(points)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k=1, distance_upper_bound=np.inf):
        """Return ``(distances, indices)`` of the ``k`` nearest points.

        With ``k == 1`` both arrays are 1-D. Misses beyond
        ``distance_upper_bound`` come back as ``inf`` / ``len(self)``.
        """
        queries = np.asarray(queries, dtype=np.float64)
        return self._tree.query(queries, k=k, distance_upper_bound=distance_upper_bound)


@dataclass(frozen=True, eq=False)
class NormalizationRecord:
    """Maps metric coordinates to the centered unit-diameter working frame."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center).reshape(3))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValidationError("normalization scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def undo(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    if len(cloud) == 0:
        raise ValidationError("empty input")
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    return PointCloud(T.apply(cloud.positions), normals, cloud.features, cloud.normal_valid)


def invert_transform(T: RigidTransform) -> RigidTransform:
    rt = T.rotation.T
    return RigidTransform(rt, -rt @ T.translation)


def compose_transforms(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """Return ``A o B``: apply ``B`` first, then ``A``."""
    return RigidTransform(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=None, outward: bool = False) -> PointCloud:
    """PCA normals from the k nearest neighbours of every point.

    The normal is the eigenvector of the smallest covariance eigenvalue. It is
    flipped to face ``viewpoint`` (the origin by default) or, with
    ``outward=True``, away from the cloud centroid. Points whose neighbourhood
    has rank < 2 get ``normal_valid = False``.
    """
    n = len(cloud)
    if k < 3:
        raise ValidationError("k must be at least 3")
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of points ({n})")
    pts = cloud.positions
    _, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = evals[:, 1] > 1e-10 * scale
    valid &= evals[:, 2] > 1e-24

    if outward:
        ref = pts - pts.mean(axis=0)
    else:
        vp = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
        ref = vp - pts
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1
    normals[~valid] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, cloud.features, valid)


def _brute_diameter(pts, chunk=2048):
    best = 0.0
    for i in range(0, len(pts), chunk):
        block = pts[i:i + chunk]
        d2 = np.sum((block[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def diameter(cloud) -> float:
    """Exact maximum pairwise distance.

    The farthest pair always lies on the convex hull, so the brute-force
    search runs over hull vertices; flat or tiny inputs fall back to all pairs.
    """
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 2:
        raise ValidationError("diameter needs at least two points")
    if len(pts) > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return _brute_diameter(pts)


def lift_depth(depth, intr: PinholeIntrinsics, mask=None) -> PointCloud:
    """Back-project masked pixels with positive depth through a pinhole camera.

    ``depth`` is (height, width) in meters with 0 marking invalid pixels.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValidationError(
            f"depth grid {depth.shape} does not match intrinsics {(intr.height, intr.width)}"
        )
    if mask is None:
        mask = np.ones_like(depth, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise ValidationError("mask and depth grid differ in size")
    v, u = np.nonzero(mask & (depth > 0) & np.isfinite(depth))
    if len(u) == 0:
        raise ValidationError("empty target")
    d = depth[v, u]
    pts = np.stack([d * (u - intr.cx) / intr.fx, d * (v - intr.cy) / intr.fy, d], axis=1)
    return PointCloud(pts)


def project_to_depth(points, intr: PinholeIntrinsics):
    """Z-buffer splat of camera-frame points into a depth grid and mask.

    Pixel coordinates are rounded; the nearest point wins each pixel.
    """
    pts = np.asarray(points, dtype=np.float64)
    depth = np.zeros((intr.height, intr.width))
    front = pts[:, 2] > 0
    p = pts[front]
    u = np.rint(intr.fx * p[:, 0] / p[:, 2] + intr.cx).astype(int)
    v = np.rint(intr.fy * p[:, 1] / p[:, 2] + intr.cy).astype(int)
    inside = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    u, v, z = u[inside], v[inside], p[inside, 2]
    order = np.argsort(-z, kind="stable")
    depth[v[order], u[order]] = z[order]
    return depth, depth > 0


def sample_noise(n: int, sigma: float, seed) -> np.ndarray:
    """``n`` i.i.d. isotropic Gaussian 3-vectors with per-axis std ``sigma``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, sigma, size=(n, 3))


def normalize_cloud(cloud: PointCloud):
    """Center on the centroid and scale to unit diameter.

    Returns the normalized cloud and the record that undoes it.
    """
    if len(cloud) < 2:
        raise ValidationError("normalization needs at least two points")
    diam = diameter(cloud)
    if diam <= 0:
        raise DegenerateError("zero diameter")
    record = NormalizationRecord(cloud.centroid, diam)
    return cloud.with_(positions=record.apply(cloud.positions)), record


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation matrix (normalized Gaussian quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return _quat_to_matrix(q)


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quaternions_to_matrices(q) -> np.ndarray:
    """Batch version of the quaternion -> matrix map; ``q`` is (M, 4), unit, w first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - z * w)
    out[:, 0, 2] = 2 * (x * z + y * w)
    out[:, 1, 0] = 2 * (x * y + z * w)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - x * w)
    out[:, 2, 0] = 2 * (x * z - y * w)
    out[:, 2, 1] = 2 * (y * z + x * w)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotation_about_axis(axis, angle) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def rotation_angle(R_a, R_b=None) -> float:
    """Geodesic angle in radians between two rotations (or of one from identity)."""
    r = np.asarray(R_a) if R_b is None else np.asarray(R_a).T @ np.asarray(R_b)
    c = (np.trace(r) - 1.0) / 2.0
    # arccos is ill-conditioned near 0; recover the angle from the skew part too
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))
