"""Per-point features: local geometric descriptors, overlap labels and the
overlap classifier, procedural semantic features, PCA reduction, fusion and
the sinusoidal positional encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateError, ValidationError
from .geom import NeighborIndex, PointCloud, diameter

log = logging.getLogger(__name__)

OVERLAP_WIDTH = 64
SEMANTIC_WIDTH = 1536

# raw descriptor layout; True marks columns invariant under rigid motion
DESCRIPTOR_COLUMNS = (
    ("linearity", True),
    ("planarity", True),
    ("sphericity", True),
    ("curvature", True),
    ("omnivariance", True),
    ("anisotropy", True),
    ("normal_x", False),
    ("normal_y", False),
    ("normal_z", False),
    ("knn_mean", True),
    ("knn_std", True),
    ("knn_max", True),
    ("centroid_offset", True),
)


def descriptor_invariant_mask(width: int = OVERLAP_WIDTH) -> np.ndarray:
    """Which of the ``width`` tiled descriptor columns are rigid-motion invariant."""
    base = np.array([inv for _, inv in DESCRIPTOR_COLUMNS])
    return base[np.arange(width) % len(base)]


def geometric_descriptors(cloud: PointCloud, k: int = 16, width: int = OVERLAP_WIDTH) -> np.ndarray:
    """Hand-computed local shape descriptors tiled to ``width`` columns.

    Per point: eigenvalue features of the k-NN covariance (linearity,
    planarity, sphericity, change of curvature, omnivariance, anisotropy),
    the three normal components, k-NN distance statistics relative to the
    cloud's median spacing, and the offset of the point from its
    neighbourhood centroid. Column ``j`` repeats raw column ``j % 13``; see
    :func:`descriptor_invariant_mask`.
    """
    if cloud.normals is None:
        raise ValidationError("geometric descriptors need normals")
    if k < 5:
        raise ValidationError("k must be at least 5")
    n = len(cloud)
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of points ({n})")
    pts = cloud.positions
    dist, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[idx]
    mu = nbrs.mean(axis=1)
    centered = nbrs - mu[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    ev = np.linalg.eigvalsh(cov)[:, ::-1]
    ev = np.maximum(ev, 0.0)
    l1 = np.maximum(ev[:, 0], 1e-300)
    l2, l3 = ev[:, 1], ev[:, 2]
    total = np.maximum(ev.sum(axis=1), 1e-300)

    nd = dist[:, 1:]
    knn_mean = nd.mean(axis=1)
    spacing = max(float(np.median(knn_mean)), 1e-12)
    normals = np.array(cloud.normals)
    if cloud.normal_valid is not None:
        normals[~cloud.normal_valid] = 0.0

    raw = np.column_stack([
        (l1 - l2) / l1,
        (l2 - l3) / l1,
        l3 / l1,
        l3 / total,
        np.cbrt(l1 * l2 * l3) / l1,
        (l1 - l3) / l1,
        normals,
        knn_mean / spacing,
        nd.std(axis=1) / spacing,
        nd.max(axis=1) / spacing,
        np.linalg.norm(pts - mu, axis=1) / spacing,
    ])
    return raw[:, np.arange(width) % raw.shape[1]]


def overlap_labels(Q: PointCloud, T_r: PointCloud, eps_fraction: float = 0.01):
    """Mutual-overlap labels for a query cloud and a target already in the query frame.

    A point overlaps when its nearest neighbour in the other cloud is within
    ``eps_fraction * diameter(Q)``.
    """
    if len(Q) == 0 or len(T_r) == 0:
        raise ValidationError("overlap labels need non-empty clouds")
    if not 0 < eps_fraction < 1:
        raise ValidationError("eps_fraction must lie in (0, 1)")
    eps = eps_fraction * diameter(Q)
    dq, _ = NeighborIndex(T_r.positions).query(Q.positions)
    dt, _ = NeighborIndex(Q.positions).query(T_r.positions)
    return dq <= eps, dt <= eps


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 32
    epochs: int = 400
    learning_rate: float = 0.5
    seed: int = 0


@dataclass(eq=False)
class OverlapClassifier:
    """Standardize -> tanh hidden layer -> 2 logits. ``hidden == 0`` is plain logistic regression."""

    mean: np.ndarray
    std: np.ndarray
    layers: list
    loss_history: list = field(default_factory=list)

    def _forward(self, x):
        h = (x - self.mean) / self.std
        acts = [h]
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < len(self.layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def logits(self, descriptors) -> np.ndarray:
        return self._forward(np.asarray(descriptors, dtype=np.float64))[-1]

    def hidden_features(self, descriptors) -> np.ndarray:
        acts = self._forward(np.asarray(descriptors, dtype=np.float64))
        return acts[-2]

    def predict(self, descriptors) -> np.ndarray:
        z = self.logits(descriptors)
        return z[:, 1] > z[:, 0]


def _softmax_xent(z, y):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -np.mean(logp[np.arange(len(y)), y])
    grad = np.exp(logp)
    grad[np.arange(len(y)), y] -= 1.0
    return loss, grad / len(y)


def train_overlap_classifier(descriptors, labels, config: ClassifierConfig = ClassifierConfig()) -> OverlapClassifier:
    """Fit the overlap head by full-batch gradient descent on mean cross-entropy.

    Two-logit softmax cross-entropy is the binary cross-entropy of the
    logit difference.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if x.ndim != 2 or len(x) != len(y):
        raise ValidationError("descriptor rows and labels must match")
    if y.all() or not y.any():
        raise DegenerateError("degenerate labels")
    yi = y.astype(np.int64)
    rng = np.random.default_rng(config.seed)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    sizes = [x.shape[1]] + ([config.hidden] if config.hidden else []) + [2]
    layers = [
        (rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)), np.zeros(b))
        for a, b in zip(sizes[:-1], sizes[1:])
    ]
    clf = OverlapClassifier(mean, std, layers)
    for _ in range(config.epochs + 1):
        acts = clf._forward(x)
        loss, g = _softmax_xent(acts[-1], yi)
        clf.loss_history.append(float(loss))
        if len(clf.loss_history) > config.epochs:
            break
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, b = layers[i]
            grads.append((acts[i].T @ g, g.sum(axis=0)))
            if i > 0:
                g = (g @ W.T) * (1.0 - acts[i] ** 2)
        for (W, b), (gW, gb) in zip(layers, reversed(grads)):
            W -= config.learning_rate * gW
            b -= config.learning_rate * gb
    return clf


@dataclass(frozen=True)
class TextureSpec:
    """Procedural appearance in the object's canonical (normalized) frame.

    ``pattern`` is ``"constant"`` (no appearance cue) or ``"regions"``
    (smoothly blended random codes around ``regions`` random anchors).
    """

    pattern: str = "regions"
    regions: int = 48
    seed: int = 0
    width: int = SEMANTIC_WIDTH
    smoothing: float = 0.5
    pooling_radius: float = 0.01

    def __post_init__(self):
        if self.pattern not in ("constant", "regions"):
            raise ValidationError(f"unknown texture pattern {self.pattern!r}")
        if self.regions < 1 or self.width < 1:
            raise ValidationError("texture needs at least one region and positive width")


_POOL_OFFSETS = np.array(
    [[0, 0, 0], [1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1],
     [-1, -1, -1], [-1, 1, 1], [1, -1, 1], [1, 1, -1]], dtype=np.float64
) / np.sqrt(3.0)


def _texture_params(texture: TextureSpec):
    rng = np.random.default_rng(texture.seed)
    codes = rng.normal(size=(texture.regions, texture.width)) / np.sqrt(texture.width)
    centers = rng.normal(size=(texture.regions, 3))
    centers *= (rng.uniform(size=(texture.regions, 1)) ** (1 / 3) * 0.5) / np.linalg.norm(
        centers, axis=1, keepdims=True)
    return codes, centers


def semantic_features_synthetic(cloud, texture: TextureSpec) -> np.ndarray:
    """Width-``texture.width`` appearance features from canonical positions.

    Each sample averages the region weights over a small set of points around
    it (the stand-in for multi-view average pooling), then mixes the region
    codes with those weights.
    """
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValidationError("empty input")
    codes, centers = _texture_params(texture)
    if texture.pattern == "constant":
        return np.repeat(codes[:1], len(pts), axis=0)
    spacing = 1.0 / texture.regions ** (1 / 3)
    h2 = (texture.smoothing * spacing) ** 2
    weights = np.zeros((len(pts), texture.regions))
    for off in _POOL_OFFSETS * texture.pooling_radius:
        d2 = np.sum((pts[:, None, :] + off - centers[None]) ** 2, axis=-1)
        logit = -d2 / (2 * h2)
        logit -= logit.max(axis=1, keepdims=True)
        w = np.exp(logit)
        weights += w / w.sum(axis=1, keepdims=True)
    weights /= len(_POOL_OFFSETS)
    return weights @ codes


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def input_width(self) -> int:
        return self.components.shape[1]

    @property
    def width(self) -> int:
        return self.components.shape[0]


def pca_fit(features_Q, target_width: int = OVERLAP_WIDTH) -> PcaBasis:
    """Mean-centered principal directions, strongest first."""
    X = np.asarray(features_Q, dtype=np.float64)
    n, d = X.shape
    if target_width < 1 or target_width > min(n - 1, d):
        raise ValidationError(f"target width {target_width} exceeds min(N-1, d) = {min(n - 1, d)}")
    mean = X.mean(axis=0)
    _, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    return PcaBasis(mean, Vt[:target_width].copy(), S[:target_width] ** 2 / (n - 1))


def pca_project(basis: PcaBasis, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != basis.input_width:
        raise ValidationError(f"feature width {X.shape[-1]} does not match basis width {basis.input_width}")
    return (X - basis.mean) @ basis.components.T


def _row_normalize(X, tiny=1e-12):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    zero = norms[:, 0] < tiny
    out = np.divide(X, norms, out=np.zeros_like(X), where=norms >= tiny)
    return out, zero


def fuse_features(O, S, return_flags: bool = False):
    """``norm(norm(O) + norm(S))`` row-wise.

    A zero row in one operand falls back to the other operand's normalized
    row; rows that are zero in both stay zero and are flagged.
    """
    O = np.asarray(O, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if O.shape != S.shape:
        raise ValidationError(f"fusion needs equal shapes, got {O.shape} and {S.shape}")
    on, oz = _row_normalize(O)
    sn, sz = _row_normalize(S)
    fused, _ = _row_normalize(on + sn)
    both = oz & sz
    # opposite unit rows cancel exactly; treat like a degenerate pair
    cancel = ~oz & ~sz & (np.linalg.norm(on + sn, axis=1) < 1e-12)
    flags = both | cancel
    if np.any(flags):
        log.warning("fuse_features: %d rows are zero in both operands", int(flags.sum()))
    return (fused, flags) if return_flags else fused


@dataclass(frozen=True)
class EncodingConfig:
    frequencies: int = 10
    attribute_width: int = 10

    @property
    def width(self) -> int:
        return self.attribute_width * (2 * self.frequencies + 1)


def positional_encoding(attrs, config: EncodingConfig = EncodingConfig()) -> np.ndarray:
    """Per attribute ``a``: ``[a, sin(2^0 pi a), cos(2^0 pi a), ..., cos(2^(L-1) pi a)]``.

    Accepts one attribute vector or an (N, width) array.
    """
    a = np.asarray(attrs, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != config.attribute_width:
        raise ValidationError(f"expected {config.attribute_width} attributes, got {a.shape[1]}")
    freqs = np.pi * 2.0 ** np.arange(config.frequencies)
    ang = a[:, :, None] * freqs
    out = np.empty(a.shape + (2 * config.frequencies + 1,))
    out[..., 0] = a
    out[..., 1::2] = np.sin(ang)
    out[..., 2::2] = np.cos(ang)
    out = out.reshape(len(a), -1)
    return out[0] if single else out


def time_encoding(t, frequencies: int = 10) -> np.ndarray:
    """The positional encoder applied to the scalar flow time."""
    return positional_encoding(np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None],
                               EncodingConfig(frequencies, 1))


def point_attributes(positions, normals, noisy, is_target) -> np.ndarray:
    """The 10 encoded attributes: coordinates, normal, noisy coordinates, cloud flag."""
    positions = np.asarray(positions, dtype=np.float64)
    flag = np.full((len(positions), 1), 1.0 if is_target else 0.0)
    return np.hstack([positions, np.asarray(normals, dtype=np.float64),
                      np.asarray(noisy, dtype=np.float64), flag])


NOISY_SLOT = slice(6, 9)


def build_conditioning(F, P) -> np.ndarray:
    """Row-wise ``[F | P]``."""
    F = np.asarray(F, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if F.ndim != 2 or P.ndim != 2 or len(F) != len(P):
        raise ValidationError(f"row counts differ: {F.shape} vs {P.shape}")
    return np.hstack([F, P])


@dataclass(frozen=True, eq=False)
class ConditioningMatrix:
    """Fused features plus the raw attributes behind the positional block.

    Keeping the attributes lets the velocity model re-encode the noisy
    coordinate slot with the current flow state; ``matrix`` is the static
    ``[F | P]`` view with the slot holding the noisy initialization.
    """

    features: np.ndarray
    attributes: np.ndarray
    encoding: EncodingConfig = EncodingConfig()

    def __post_init__(self):
        if len(self.features) != len(self.attributes):
            raise ValidationError("features and attributes must have the same row count")
        if self.attributes.shape[1] != self.encoding.attribute_width:
            raise ValidationError("attribute width does not match the encoding config")

    def __len__(self):
        return len(self.features)

    @property
    def width(self) -> int:
        return self.features.shape[1] + self.encoding.width

    @property
    def matrix(self) -> np.ndarray:
        return build_conditioning(self.features, positional_encoding(self.attributes, self.encoding))

    def with_noisy(self, positions) -> "ConditioningMatrix":
        attrs = np.array(self.attributes)
        attrs[:, NOISY_SLOT] = positions
        return replace(self, attributes=attrs)

    def take(self, index) -> "ConditioningMatrix":
        return replace(self, features=self.features[index], attributes=self.attributes[index])
