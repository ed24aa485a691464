"""Rigid pose recovery from (possibly contaminated) point correspondences.

Kabsch gives the closed-form least-squares rotation; RANSAC wraps it for
outlier rejection, point-to-point ICP polishes the result against the model
cloud.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError, ValidationError
from .geom import NeighborIndex, PointCloud, RigidTransform, invert_transform

log = logging.getLogger(__name__)

__all__ = [
    "CorrespondenceSet",
    "RansacConfig",
    "IcpConfig",
    "RegistrationResult",
    "IcpResult",
    "kabsch",
    "svd_global_align",
    "count_inliers",
    "ransac_register",
    "icp_refine",
    "inlier_ratio",
    "recover_camera_pose",
]


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index-aligned pairs: ``source[i]`` (camera frame) <-> ``destination[i]`` (query frame)."""

    source: np.ndarray
    destination: np.ndarray

    def __post_init__(self):
        src = np.array(self.source, dtype=np.float64)
        dst = np.array(self.destination, dtype=np.float64)
        if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
            raise ValidationError(f"correspondences must be matching M x 3 arrays, got {src.shape} / {dst.shape}")
        if len(src) < 3:
            raise ValidationError("need at least 3 correspondences")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
            raise ValidationError("correspondences contain non-finite values")
        src.flags.writeable = False
        dst.flags.writeable = False
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "destination", dst)

    def __len__(self):
        return len(self.source)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    threshold: float = 0.01
    sample_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("RANSAC needs at least one iteration")
        if not self.threshold > 0:
            raise ValidationError("RANSAC threshold must be positive")
        if self.sample_size != 3:
            raise ValidationError("the minimal sample for a rigid transform is 3")


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 3000
    threshold: float = 0.01
    tolerance: float = 1e-7

    def __post_init__(self):
        if self.max_iterations < 1 or not self.threshold > 0 or not self.tolerance > 0:
            raise ValidationError("ICP parameters must be positive")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    inlier_mask: np.ndarray
    best_iteration: int
    residual_rms: float
    hypotheses: int = 0
    seed: Optional[int] = None
    threshold: Optional[float] = None

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    iterations: int
    rms_history: list = field(default_factory=list)
    warning: Optional[str] = None

    @property
    def residual_rms(self) -> float:
        return self.rms_history[-1]


def _rotation_from_cov(H):
    """Proper rotation maximizing ``tr(R H)`` for a (…, 3, 3) cross-covariance."""
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    Ut = np.swapaxes(U, -1, -2)
    d = np.sign(np.linalg.det(V @ Ut))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape[:-2] + (3, 3))
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    return V @ D @ Ut, S


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Args:
        src, dst: (M, 3) index-aligned point arrays, M >= 3.
        weights: optional non-negative per-pair weights.

    Returns:
        The proper rotation and translation minimizing
        ``sum_i w_i |R src_i + t - dst_i|^2``. A reflection in the SVD solution
        is corrected by flipping the least significant singular direction.

    Raises:
        ValidationError: fewer than 3 pairs, shape mismatch, bad weights.
        DegenerateError: the cross-covariance has rank < 2 (collinear or
            coincident points).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValidationError("kabsch expects two M x 3 arrays of equal shape")
    if len(src) < 3:
        raise ValidationError("kabsch needs at least 3 points")
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(src),) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite, non-negative, one per pair")
        if w.sum() <= 0:
            raise DegenerateError("degenerate configuration: all weights are zero")
        w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    a = src - cs
    b = dst - cd
    H = (a * w[:, None]).T @ b
    R, S = _rotation_from_cov(H)
    if S[0] <= 1e-300 or S[1] <= 1e-10 * S[0]:
        raise DegenerateError("degenerate configuration")
    return RigidTransform(R, cd - R @ cs)


def _batch_kabsch(src3, dst3):
    """Kabsch on a stack of (B, 3, 3) minimal samples. Returns (R, t) stacks."""
    cs = src3.mean(axis=1)
    cd = dst3.mean(axis=1)
    a = src3 - cs[:, None, :]
    b = dst3 - cd[:, None, :]
    H = np.einsum("bki,bkj->bij", a, b)
    R, _ = _rotation_from_cov(H)
    t = cd - np.einsum("bij,bj->bi", R, cs)
    return R, t


def count_inliers(T: RigidTransform, corr: CorrespondenceSet, threshold: float):
    """Pairs whose transformed source lands within ``threshold`` of the destination."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    err = np.linalg.norm(T.apply(corr.source) - corr.destination, axis=1)
    mask = err <= threshold
    return int(np.count_nonzero(mask)), mask


def _inlier_rms(T, corr, mask):
    if not np.any(mask):
        return float("inf")
    err = T.apply(corr.source[mask]) - corr.destination[mask]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def svd_global_align(corr: CorrespondenceSet, threshold: float = 0.01) -> RegistrationResult:
    """Uniform-weight Kabsch over every pair; the no-outlier-handling baseline."""
    T = kabsch(corr.source, corr.destination)
    _, mask = count_inliers(T, corr, threshold)
    err = T.apply(corr.source) - corr.destination
    rms = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    return RegistrationResult(T, mask, best_iteration=-1, residual_rms=rms, hypotheses=1, threshold=threshold)


def _non_degenerate(p):
    """True when the (…, 3, 3) triangles are far from collinear."""
    e1 = p[..., 1, :] - p[..., 0, :]
    e2 = p[..., 2, :] - p[..., 0, :]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=-1)
    longest = np.maximum(np.sum(e1 * e1, axis=-1), np.sum(e2 * e2, axis=-1))
    return area2 > 1e-6 * np.maximum(longest, 1e-300)


def _draw_triples(corr, config):
    """One non-degenerate minimal sample per iteration.

    Each iteration owns a counter-based Philox stream keyed by the seed, so the
    triple for iteration ``i`` does not depend on any other iteration. Redraws
    for degenerate samples come from the same stream; the total number of
    draws is capped at 10x the iteration count.
    """
    m = len(corr)
    budget = 10 * config.iterations
    seed_key = np.uint64(config.seed % (1 << 64))
    triples, owners = [], []
    for i in range(config.iterations):
        rng = np.random.Generator(np.random.Philox(key=seed_key, counter=i))
        found = False
        while budget > 0 and not found:
            budget -= 1
            idx = rng.choice(m, size=3, replace=False)
            if _non_degenerate(corr.source[idx]) and _non_degenerate(corr.destination[idx]):
                triples.append(idx)
                owners.append(i)
                found = True
        if not found:
            break
    return np.array(triples, dtype=np.int64).reshape(-1, 3), np.array(owners, dtype=np.int64)


def ransac_register(corr: CorrespondenceSet, config: RansacConfig = RansacConfig()) -> RegistrationResult:
    """Outlier-robust rigid registration.

    Every iteration fits Kabsch to three distinct correspondences and counts
    the pairs within ``config.threshold``. The winner has the most inliers;
    ties go to the lower inlier RMS, then to the earlier iteration. The winner
    is refit on its consensus set (repeated while the set grows) and the
    all-pairs fit is kept as a fallback candidate, so the returned model never
    has fewer inliers than the plain global fit.
    """
    triples, owners = _draw_triples(corr, config)
    if len(triples) == 0:
        raise DegenerateError("no valid hypothesis", stage="ransac")
    src, dst = corr.source, corr.destination
    R, t = _batch_kabsch(src[triples], dst[triples])

    thr2 = config.threshold ** 2
    counts = np.empty(len(R), dtype=np.int64)
    sq_sum = np.empty(len(R))
    chunk = max(1, 2_000_000 // max(len(src), 1))
    for lo in range(0, len(R), chunk):
        pred = np.einsum("bij,mj->bmi", R[lo:lo + chunk], src) + t[lo:lo + chunk, None, :]
        d2 = np.sum((pred - dst[None]) ** 2, axis=-1)
        inl = d2 <= thr2
        counts[lo:lo + chunk] = inl.sum(axis=1)
        sq_sum[lo:lo + chunk] = np.where(inl, d2, 0.0).sum(axis=1)
    rms = np.sqrt(sq_sum / np.maximum(counts, 1))
    rms[counts == 0] = np.inf
    best = np.lexsort((owners, rms, -counts))[0]

    candidates = []
    T_best = RigidTransform(_orthonormalize(R[best]), t[best])
    n_best, mask = count_inliers(T_best, corr, config.threshold)
    candidates.append((n_best, _inlier_rms(T_best, corr, mask), T_best, mask))
    for _ in range(10):
        try:
            T_ref = kabsch(src[mask], dst[mask])
        except (DegenerateError, ValidationError):
            break
        n_ref, mask_ref = count_inliers(T_ref, corr, config.threshold)
        candidates.append((n_ref, _inlier_rms(T_ref, corr, mask_ref), T_ref, mask_ref))
        if n_ref <= np.count_nonzero(mask):
            break
        mask = mask_ref
    try:
        T_all = kabsch(src, dst)
        n_all, mask_all = count_inliers(T_all, corr, config.threshold)
        candidates.append((n_all, _inlier_rms(T_all, corr, mask_all), T_all, mask_all))
    except DegenerateError:
        pass
    # stable order keeps the earliest candidate among exact ties
    n, rms_final, T_final, mask_final = sorted(candidates, key=lambda c: (-c[0], c[1]))[0]
    return RegistrationResult(
        T_final,
        mask_final,
        best_iteration=int(owners[best]),
        residual_rms=rms_final,
        hypotheses=len(triples),
        seed=config.seed,
        threshold=config.threshold,
    )


def _orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def _truncated_rms(d, threshold):
    return float(np.sqrt(np.mean(np.minimum(d, threshold) ** 2)))


def icp_refine(src_cloud, dst_cloud, init: RigidTransform, config: IcpConfig = IcpConfig()) -> IcpResult:
    """Point-to-point ICP with hard distance gating.

    Alternates nearest-neighbour matching (pairs farther than
    ``config.threshold`` are dropped) with a Kabsch refit. The reported
    residual is the truncated RMS ``sqrt(mean(min(d, threshold)^2))`` over all
    source points; this quantity never increases from one iteration to the
    next. Stops when the incremental motion falls below ``config.tolerance``.
    """
    src = src_cloud.positions if isinstance(src_cloud, PointCloud) else np.asarray(src_cloud, dtype=np.float64)
    dst = dst_cloud.positions if isinstance(dst_cloud, PointCloud) else np.asarray(dst_cloud, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise ValidationError("ICP needs non-empty clouds")
    index = NeighborIndex(dst)
    thr = config.threshold

    T = init
    d, nn = index.query(T.apply(src))
    history = [_truncated_rms(d, thr)]
    warning = None
    it = 0
    for it in range(1, config.max_iterations + 1):
        matched = d <= thr
        if np.count_nonzero(matched) < 3:
            warning = "no matched pairs within threshold" if not np.any(matched) else "too few matched pairs"
            it -= 1
            break
        try:
            T_new = kabsch(src[matched], dst[nn[matched]])
        except DegenerateError:
            warning = "degenerate matched set"
            it -= 1
            break
        d_new, nn_new = index.query(T_new.apply(src))
        rms_new = _truncated_rms(d_new, thr)
        if rms_new > history[-1]:
            # round-off only; keep the better transform
            it -= 1
            break
        delta = np.linalg.norm(T_new.rotation - T.rotation) + np.linalg.norm(T_new.translation - T.translation)
        T, d, nn = T_new, d_new, nn_new
        history.append(rms_new)
        if delta < config.tolerance:
            break
    if warning:
        log.warning("ICP stopped early: %s", warning)
    return IcpResult(T, it, history, warning)


def inlier_ratio(T_hat, T_r, tau_fraction: float, diam: float) -> float:
    """Percentage of index-aligned points closer than ``tau_fraction * diam``."""
    a = T_hat.positions if isinstance(T_hat, PointCloud) else np.asarray(T_hat, dtype=np.float64)
    b = T_r.positions if isinstance(T_r, PointCloud) else np.asarray(T_r, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("inlier_ratio needs index-aligned clouds of equal length")
    if not tau_fraction > 0:
        raise ValidationError("tau_fraction must be positive")
    d = np.linalg.norm(a - b, axis=1)
    return 100.0 * np.count_nonzero(d < tau_fraction * diam) / len(a)


def recover_camera_pose(result) -> RigidTransform:
    """Turn a target->query registration into the query pose in the camera frame."""
    T = result.transform if hasattr(result, "transform") else result
    return invert_transform(T)
