"""Synthetic single-object scenes: a fixed query model per shape, a random
pose, and a partial, noisy, outlier-contaminated observation of it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import ValidationError
from .features import TextureSpec
from .geom import (
    NeighborIndex,
    NormalizationRecord,
    PinholeIntrinsics,
    PointCloud,
    RigidTransform,
    diameter,
    estimate_normals,
    project_to_depth,
    random_rotation,
    rotation_about_axis,
)

SHAPES = ("cube", "cuboid", "cylinder", "sphere", "blob", "L-bracket")
POSE_MODES = ("free", "quadrant")
QUERY_POINTS = 512


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene.

    ``pose`` is ``"free"`` (uniform rotation) or ``"quadrant"`` (fixed tilt,
    yaw about the object z axis drawn from multiples of 90 degrees plus up to
    ``jitter_deg`` of jitter). Distances are in meters.

    By default the target is cut from the query samples themselves. With
    ``resample`` it is cut from an independent draw of the same surface, so
    no target point coincides with a query point.
    """

    shape: str = "L-bracket"
    texture: TextureSpec = field(default_factory=TextureSpec)
    visibility: float = 0.7
    noise: float = 0.0
    outliers: float = 0.0
    occluders: int = 0
    seed: int = 0
    pose: str = "free"
    jitter_deg: float = 3.0
    query_points: int = QUERY_POINTS
    depth: bool = False
    resample: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not 0 < self.visibility <= 1:
            raise ValidationError("visibility must lie in (0, 1]")
        if not 0 <= self.outliers < 1:
            raise ValidationError("outlier fraction must lie in [0, 1)")
        if self.noise < 0 or self.occluders < 0:
            raise ValidationError("noise and occluder count must be non-negative")
        if self.pose not in POSE_MODES:
            raise ValidationError(f"unknown pose mode {self.pose!r}")


@dataclass(frozen=True, eq=False)
class SceneRecord:
    """Query model (canonical frame), observed target (camera frame) and ground truth.

    ``source_index[i]`` is the query point that target point ``i`` was
    observed from (the nearest one when the target is resampled), or -1 for
    injected outliers.
    """

    spec: SceneSpec
    query: PointCloud
    target: PointCloud
    gt: RigidTransform
    source_index: np.ndarray
    normalization: NormalizationRecord
    intrinsics: Optional[PinholeIntrinsics] = None
    depth: Optional[np.ndarray] = None

    @property
    def diameter(self) -> float:
        return self.normalization.scale

    @property
    def target_in_query_frame(self) -> np.ndarray:
        """``T^r``: the observed target mapped into the canonical frame by the ground truth."""
        return self.gt.inverse().apply(self.target.positions)


DEFAULT_INTRINSICS = PinholeIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def _shape_seed(shape):
    return zlib.crc32(shape.encode())


def _box_surface(rng, n, size, center=(0.0, 0.0, 0.0)):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    normals = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    u[np.arange(n), axis] = sign * np.array(size)[axis] / 2
    normals[np.arange(n), axis] = sign
    return u + np.asarray(center), normals


def _inside_box(p, size, center, margin=1e-9):
    return np.all(np.abs(p - center) < np.asarray(size) / 2 - margin, axis=1)


def sample_surface(shape: str, n: int, rng):
    """``n`` area-uniform surface samples and outward normals for a named shape (meters)."""
    if shape == "cube":
        return _box_surface(rng, n, (0.1, 0.1, 0.1))
    if shape == "cuboid":
        return _box_surface(rng, n, (0.12, 0.12, 0.06))
    if shape == "cylinder":
        r, h = 0.05, 0.12
        side, cap = 2 * np.pi * r * h, np.pi * r * r
        kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(kind == 0, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(kind == 0, rng.uniform(-h / 2, h / 2, n), np.where(kind == 1, h / 2, -h / 2))
        pts = np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])
        normals = np.zeros((n, 3))
        normals[kind == 0, 0] = np.cos(theta[kind == 0])
        normals[kind == 0, 1] = np.sin(theta[kind == 0])
        normals[kind == 1, 2] = 1.0
        normals[kind == 2, 2] = -1.0
        return pts, normals
    if shape == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return 0.08 * d, d
    if shape == "blob":
        return _blob_surface(rng, n)
    if shape == "L-bracket":
        a_size, a_center = (0.14, 0.04, 0.04), np.array([0.0, -0.03, 0.0])
        b_size, b_center = (0.04, 0.10, 0.04), np.array([-0.05, 0.0, 0.0])
        pts, nrm = [], []
        got = 0
        while got < n:
            pa, na = _box_surface(rng, n, a_size, a_center)
            pb, nb = _box_surface(rng, n, b_size, b_center)
            keep_a = ~_inside_box(pa, b_size, b_center)
            keep_b = ~_inside_box(pb, a_size, a_center)
            # area-proportional mix of the two boxes' exposed surfaces
            p = np.vstack([pa[keep_a], pb[keep_b]])
            q = np.vstack([na[keep_a], nb[keep_b]])
            w = np.concatenate([np.full(keep_a.sum(), _box_area(a_size)), np.full(keep_b.sum(), _box_area(b_size))])
            pick = rng.choice(len(p), size=n, replace=False, p=w / w.sum())
            pts.append(p[pick])
            nrm.append(q[pick])
            got += n
        return np.vstack(pts)[:n], np.vstack(nrm)[:n]
    raise ValidationError(f"unknown shape {shape!r}")


def _box_area(size):
    sx, sy, sz = size
    return 2 * (sx * sy + sy * sz + sx * sz)


def _blob_radius(d):
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return 0.07 * (1.0 + 0.25 * x * y + 0.2 * z ** 2 - 0.15 * x + 0.1 * y * z + 0.12 * x ** 3)


def _blob_surface(rng, n):
    # oversample directions and thin by the surface area element
    d = rng.normal(size=(4 * n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = _blob_radius(d)
    w = r ** 2
    pick = rng.choice(len(d), size=n, replace=False, p=w / w.sum())
    pts = d[pick] * r[pick, None]
    # numerical normal from the implicit function |p| - r(p/|p|)
    eps = 1e-6
    grads = np.zeros_like(pts)
    for i in range(3):
        dp = np.zeros(3)
        dp[i] = eps
        f = lambda p: np.linalg.norm(p, axis=1) - _blob_radius(p / np.linalg.norm(p, axis=1, keepdims=True))
        grads[:, i] = (f(pts + dp) - f(pts - dp)) / (2 * eps)
    return pts, grads / np.linalg.norm(grads, axis=1, keepdims=True)


@lru_cache(maxsize=32)
def _query_model(shape: str, n: int):
    rng = np.random.default_rng(_shape_seed(shape))
    pts, normals = sample_surface(shape, n, rng)
    center = pts.mean(axis=0)
    pts = pts - center
    for a in (pts, normals, center):
        a.flags.writeable = False
    return pts, normals, center


def query_cloud(shape: str, n: int = QUERY_POINTS) -> PointCloud:
    """The fixed query model of a shape, centered on its sample centroid, with PCA normals."""
    pts, _, _ = _query_model(shape, n)
    return estimate_normals(PointCloud(pts), k=16, outward=True)


def _dense_surface(shape: str, center):
    rng = np.random.default_rng(_shape_seed(shape) + 1)
    pts, _ = sample_surface(shape, 20000, rng)
    return pts - center


def sample_pose(spec: SceneSpec, rng) -> RigidTransform:
    if spec.pose == "free":
        R = random_rotation(rng)
    else:
        yaw = np.pi / 4 + rng.integers(4) * np.pi / 2 + np.deg2rad(rng.uniform(-spec.jitter_deg, spec.jitter_deg))
        R = rotation_about_axis([1, 0, 0], np.deg2rad(135.0)) @ rotation_about_axis([0, 0, 1], yaw)
    t = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.6, 0.9)])
    return RigidTransform(R, t)


def generate_scene(spec: SceneSpec) -> SceneRecord:
    """Render one scene from its spec; deterministic in ``spec.seed``.

    The target keeps the front-facing query points under the ground-truth
    pose, cut down to ``visibility`` of them by a random plane, minus points
    inside occluder balls. Sensor noise is then added and outliers are drawn
    uniformly from the target's bounding box inflated 1.5x, rejecting draws
    closer than 5% of the diameter to the true surface.
    """
    rng = np.random.default_rng([spec.seed, _shape_seed(spec.shape)])
    q_pts, q_true_normals, q_center = _query_model(spec.shape, spec.query_points)
    query = query_cloud(spec.shape, spec.query_points)
    diam = diameter(query)
    gt = sample_pose(spec, rng)

    src_pts, src_normals = q_pts, q_true_normals
    if spec.resample:
        src_pts, src_normals = sample_surface(spec.shape, spec.query_points, rng)
        src_pts = src_pts - q_center
    cam_pts = gt.apply(src_pts)
    cam_normals = src_normals @ gt.rotation.T
    idx = np.nonzero(np.einsum("ij,ij->i", cam_normals, -cam_pts) > 0)[0]
    if spec.visibility < 1.0 and len(idx):
        view = cam_pts[idx].mean(axis=0)
        direction = np.cross(view, rng.normal(size=3))
        direction /= np.linalg.norm(direction)
        order = np.argsort(cam_pts[idx] @ direction, kind="stable")
        idx = np.sort(idx[order[: int(round(spec.visibility * len(idx)))]])
    for _ in range(spec.occluders):
        if len(idx) == 0:
            break
        c = cam_pts[idx[rng.integers(len(idx))]]
        idx = idx[np.linalg.norm(cam_pts[idx] - c, axis=1) > 0.2 * diam]
    if len(idx) < 50:
        raise ValidationError(f"insufficient target: {len(idx)} points", stage="scene")

    inliers = cam_pts[idx] + rng.normal(0.0, spec.noise, size=(len(idx), 3)) if spec.noise > 0 else cam_pts[idx]
    source = idx.astype(np.int64)
    if spec.resample:
        source = NeighborIndex(q_pts).query(src_pts[idx])[1].astype(np.int64)
    n_out = int(round(spec.outliers / (1.0 - spec.outliers) * len(idx)))
    if n_out:
        surface = NeighborIndex(gt.apply(_dense_surface(spec.shape, q_center)))
        lo, hi = inliers.min(axis=0), inliers.max(axis=0)
        mid, half = (lo + hi) / 2, 0.75 * (hi - lo)
        out = np.empty((0, 3))
        while len(out) < n_out:
            cand = rng.uniform(mid - half, mid + half, size=(2 * n_out, 3))
            d, _ = surface.query(cand)
            out = np.vstack([out, cand[d > 0.05 * diam]])
        positions = np.vstack([inliers, out[:n_out]])
        source = np.concatenate([source, np.full(n_out, -1, dtype=np.int64)])
        perm = rng.permutation(len(positions))
        positions, source = positions[perm], source[perm]
    else:
        positions = inliers

    target = estimate_normals(PointCloud(positions), k=min(16, len(positions)))
    depth = intr = None
    if spec.depth:
        intr = DEFAULT_INTRINSICS
        depth, _ = project_to_depth(positions, intr)
    norm = NormalizationRecord(query.centroid, diam)
    return SceneRecord(spec, query, target, gt, source, norm, intr, depth)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_scenes(base: SceneSpec, count: int, seed: int, skip_insufficient: bool = True):
    """``count`` scenes sharing ``base`` with per-scene derived seeds.

    Seeds whose scene leaves too few target points are skipped.
    """
    out = []
    index = 0
    while len(out) < count:
        spec = replace(base, seed=scene_seed(seed, index))
        index += 1
        try:
            out.append(generate_scene(spec))
        except ValidationError:
            if not skip_insufficient or index > 10 * count + 100:
                raise
    return out
