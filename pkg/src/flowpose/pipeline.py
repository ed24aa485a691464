"""End-to-end pose estimation and the evaluation / ablation runners.

    features -> denoise -> RANSAC-Kabsch -> ICP -> invert

Everything runs in meters except the flow model, which works in the query's
centered unit-diameter frame.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import FlowposeError, ValidationError
from .features import (
    OVERLAP_WIDTH,
    SEMANTIC_WIDTH,
    ConditioningMatrix,
    EncodingConfig,
    TextureSpec,
    fuse_features,
    geometric_descriptors,
    overlap_labels,
    pca_fit,
    pca_project,
    point_attributes,
    semantic_features_synthetic,
)
from .flow import (
    DEFAULT_SIGMA,
    FlowExample,
    MlpVelocityModel,
    OracleVelocityModel,
    TrainConfig,
    denoise_target,
    train_velocity_model,
)
from .geom import NeighborIndex, diameter, PointCloud, RigidTransform, rotation_about_axis, rotation_angle
from .register import (
    CorrespondenceSet,
    IcpConfig,
    RansacConfig,
    icp_refine,
    inlier_ratio,
    ransac_register,
    recover_camera_pose,
    svd_global_align,
)
from .scenes import SceneRecord, SceneSpec, generate_scenes, query_cloud

log = logging.getLogger(__name__)

IR_GRID = (0.005, 0.01, 0.02, 0.03, 0.05, 0.1)
FEATURE_MODES = ("fused", "overlap", "appearance")


@dataclass(frozen=True)
class PipelineConfig:
    overlap_width: int = OVERLAP_WIDTH
    semantic_width: int = SEMANTIC_WIDTH
    encoding: EncodingConfig = EncodingConfig()
    k: int = 16
    steps: int = 50
    sigma: float = DEFAULT_SIGMA
    ransac: RansacConfig = RansacConfig()
    icp: IcpConfig = IcpConfig()
    feature_mode: str = "fused"
    semantic_noise: float = 0.1
    solver: str = "ransac"
    refine: bool = True
    model_path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ValidationError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.solver not in ("ransac", "svd"):
            raise ValidationError("solver must be 'ransac' or 'svd'")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")

    @property
    def conditioning_width(self) -> int:
        return self.overlap_width + self.encoding.width


@dataclass(frozen=True)
class PoseMetrics:
    rotation_deg: float
    translation: float
    add: float
    adds: float

    def success(self, diam, rot_deg=5.0, trans_frac=0.05) -> bool:
        return self.rotation_deg < rot_deg and self.translation < trans_frac * diam


@dataclass(eq=False)
class SceneEncoding:
    """Everything the flow model needs for one scene, in the normalized frame."""

    query: np.ndarray
    target: np.ndarray
    target_center: np.ndarray
    conditioning: ConditioningMatrix
    target_r: Optional[np.ndarray] = None

    def example(self) -> FlowExample:
        if self.target_r is None:
            raise ValidationError("training needs the ground-truth target")
        return FlowExample(np.vstack([self.query, self.target_r]), self.conditioning, len(self.query))


@lru_cache(maxsize=16)
def _query_features(shape, n, texture, k, width):
    """Per-object constants: normalized query, its descriptors, semantic features and PCA basis."""
    Q = query_cloud(shape, n)
    diam = diameter(Q)
    center = Q.centroid
    qn = PointCloud((Q.positions - center) / diam, Q.normals)
    O = geometric_descriptors(qn, k, width)
    S = semantic_features_synthetic(qn, texture)
    basis = pca_fit(S, width)
    return qn, O, S, basis


def _row_norm(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 1e-12)


def _combine(O, PS, mode):
    if mode == "fused":
        return fuse_features(O, PS)
    if mode == "overlap":
        return _row_norm(O)
    return _row_norm(PS)


def _scene_rng(record: SceneRecord, config: PipelineConfig, salt: int):
    return np.random.default_rng([config.seed, record.spec.seed, salt])


def encode_scene(record: SceneRecord, config: PipelineConfig = PipelineConfig()) -> SceneEncoding:
    """Features and conditioning for one scene.

    Target appearance comes from evaluating the object's texture at the true
    canonical location of each observed point (plus noise); outliers get
    unrelated random appearance rows.
    """
    spec = record.spec
    norm = record.normalization
    qn, O_q, S_q, basis = _query_features(spec.shape, spec.query_points, spec.texture, config.k,
                                          config.overlap_width)
    rng = _scene_rng(record, config, 1)

    t_center = record.target.centroid
    tn = (record.target.positions - t_center) / norm.scale
    t_cloud = PointCloud(tn, record.target.normals, normal_valid=record.target.normal_valid)
    O_t = geometric_descriptors(t_cloud, min(config.k, len(tn)), config.overlap_width)

    canon = norm.apply(record.target_in_query_frame)
    S_t = semantic_features_synthetic(canon, spec.texture)
    scale = float(np.median(np.linalg.norm(S_q, axis=1)))
    outl = record.source_index < 0
    if np.any(outl):
        junk = rng.normal(size=(int(outl.sum()), S_t.shape[1]))
        S_t[outl] = junk / np.linalg.norm(junk, axis=1, keepdims=True) * scale
    if config.semantic_noise > 0:
        S_t = S_t + rng.normal(0.0, config.semantic_noise * scale / np.sqrt(S_t.shape[1]), size=S_t.shape)

    F_q = _combine(O_q, pca_project(basis, S_q), config.feature_mode)
    F_t = _combine(O_t, pca_project(basis, S_t), config.feature_mode)
    attrs = np.vstack([
        point_attributes(qn.positions, qn.normals, qn.positions, is_target=False),
        point_attributes(tn, record.target.normals, np.zeros_like(tn), is_target=True),
    ])
    C = ConditioningMatrix(np.vstack([F_q, F_t]), attrs, config.encoding)
    return SceneEncoding(qn.positions, tn, t_center, C, canon)


def denoise_scene(record: SceneRecord, config: PipelineConfig, model, enc: Optional[SceneEncoding] = None,
                  steps: Optional[int] = None):
    """Run the flow model; returns ``(T_hat in meters, query frame; encoding; seconds)``."""
    enc = enc or encode_scene(record, config)
    if isinstance(model, str) and model == "oracle":
        model = OracleVelocityModel(np.vstack([enc.query, enc.target_r]))
    t0 = time.perf_counter()
    try:
        T_hat_n = denoise_target(enc.query, enc.target, enc.conditioning, model, steps or config.steps,
                                 config.sigma, seed=_scene_rng(record, config, 2))
    except FlowposeError as exc:
        exc.stage = exc.stage or "denoise"
        raise
    seconds = time.perf_counter() - t0
    return record.normalization.undo(T_hat_n.positions), enc, seconds


def solve_pose(record: SceneRecord, T_hat, config: PipelineConfig, solver: Optional[str] = None,
               refine: Optional[bool] = None):
    """Registration of the observed target onto its denoised copy, then ICP and inversion."""
    solver = solver or config.solver
    refine = config.refine if refine is None else refine
    corr = CorrespondenceSet(record.target.positions, T_hat)
    try:
        if solver == "ransac":
            ransac = replace(config.ransac, seed=int(np.random.SeedSequence([config.seed, record.spec.seed])
                                                     .generate_state(1)[0]))
            reg = ransac_register(corr, ransac)
        else:
            reg = svd_global_align(corr, config.ransac.threshold)
    except FlowposeError as exc:
        exc.stage = exc.stage or solver
        raise
    icp = None
    target_to_query = reg.transform
    if refine:
        try:
            icp = icp_refine(record.target, record.query, reg.transform, config.icp)
        except FlowposeError as exc:
            exc.stage = exc.stage or "icp"
            raise
        target_to_query = icp.transform
    return recover_camera_pose(target_to_query), reg, icp


def estimate_pose(record: SceneRecord, config: PipelineConfig = PipelineConfig(), model="oracle"):
    """Full pipeline for one scene. Returns ``(pose, registration, diagnostics)``.

    ``pose`` maps canonical query coordinates into the camera frame. The
    diagnostics carry stage timings and, since synthetic scenes know their
    ground truth, the inlier ratio of the denoised target over ``IR_GRID``.
    """
    t0 = time.perf_counter()
    enc = encode_scene(record, config)
    t1 = time.perf_counter()
    T_hat, enc, t_denoise = denoise_scene(record, config, model, enc)
    t2 = time.perf_counter()
    pose, reg, icp = solve_pose(record, T_hat, config)
    t3 = time.perf_counter()
    T_r = record.target_in_query_frame
    ir = {tau: inlier_ratio(T_hat, T_r, tau, record.diameter) for tau in IR_GRID}
    diagnostics = {
        "inlier_ratio": ir,
        "seconds": {"features": t1 - t0, "denoise": t_denoise, "register": t3 - t2, "total": t3 - t0},
        "ransac_inliers": reg.inlier_count,
        "icp_iterations": None if icp is None else icp.iterations,
        "icp_warning": None if icp is None else icp.warning,
        "T_hat": T_hat,
    }
    return pose, reg, diagnostics


def eval_metrics(pred: RigidTransform, gt: RigidTransform, Q) -> PoseMetrics:
    """Geodesic rotation error (degrees), translation error, ADD and ADD-S over ``Q``."""
    pts = Q.positions if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    rot = np.degrees(rotation_angle(pred.rotation, gt.rotation))
    trans = float(np.linalg.norm(pred.translation - gt.translation))
    p = pred.apply(pts)
    g = gt.apply(pts)
    add = float(np.mean(np.linalg.norm(p - g, axis=1)))
    d, _ = NeighborIndex(g).query(p)
    return PoseMetrics(float(rot), trans, add, float(np.mean(d)))


def contaminate(T_hat, fraction, rng):
    """Replace ``fraction`` of the rows with uniform draws from the 1.5x inflated bounding box."""
    T_hat = np.array(T_hat)
    n = int(round(fraction * len(T_hat)))
    if n == 0:
        return T_hat
    lo, hi = T_hat.min(axis=0), T_hat.max(axis=0)
    mid, half = (lo + hi) / 2, 0.75 * (hi - lo)
    rows = rng.choice(len(T_hat), size=n, replace=False)
    T_hat[rows] = rng.uniform(mid - half, mid + half, size=(n, 3))
    return T_hat


SOLVER_VARIANTS = (("svd", False), ("svd", True), ("ransac", False), ("ransac", True))


def _variant_name(solver, refine):
    return solver + ("+icp" if refine else "")


def _summary(metrics, diams):
    ok = [m.success(d) for m, d in zip(metrics, diams)]
    return {
        "success_rate": 100.0 * float(np.mean(ok)),
        "mean_rotation_deg": float(np.mean([m.rotation_deg for m in metrics])),
        "median_rotation_deg": float(np.median([m.rotation_deg for m in metrics])),
        "mean_translation": float(np.mean([m.translation for m in metrics])),
        "mean_add": float(np.mean([m.add for m in metrics])),
        "mean_adds": float(np.mean([m.adds for m in metrics])),
    }


def run_ablation_solvers(records: Sequence[SceneRecord], model, config: PipelineConfig = PipelineConfig(),
                         contamination: float = 0.0, jitter: float = 0.0, variants=SOLVER_VARIANTS):
    """Solver comparison on identical denoised targets.

    ``jitter`` adds Gaussian noise (as a fraction of the diameter) to every
    denoised point, then ``contamination`` of the rows are replaced by gross
    outliers, before any solver sees them.
    """
    outputs = []
    for rec in records:
        T_hat, _, _ = denoise_scene(rec, config, model)
        rng = _scene_rng(rec, config, 3)
        if jitter > 0:
            T_hat = T_hat + rng.normal(0.0, jitter * rec.diameter, size=T_hat.shape)
        outputs.append(contaminate(T_hat, contamination, rng))
    rows = []
    diams = [r.diameter for r in records]
    for solver, refine in variants:
        metrics = []
        for rec, T_hat in zip(records, outputs):
            pose, _, _ = solve_pose(rec, T_hat, config, solver, refine)
            metrics.append(eval_metrics(pose, rec.gt, rec.query))
        rows.append({"variant": _variant_name(solver, refine), "scenes": len(records), **_summary(metrics, diams)})
    return rows


def run_steps_sweep(records: Sequence[SceneRecord], model, steps_list: Sequence[int],
                    config: PipelineConfig = PipelineConfig()):
    """Accuracy and per-scene wall clock for each number of Euler steps.

    Step counts are interleaved within each scene so slow drifts in machine
    load affect every K alike.
    """
    steps_list = [int(K) for K in steps_list]
    metrics = {K: [] for K in steps_list}
    total = {K: [] for K in steps_list}
    denoise = {K: [] for K in steps_list}
    for rec in records:
        enc = encode_scene(rec, config)
        for K in steps_list:
            t0 = time.perf_counter()
            T_hat, _, secs = denoise_scene(rec, config, model, enc, steps=K)
            pose, _, _ = solve_pose(rec, T_hat, config)
            total[K].append(time.perf_counter() - t0)
            denoise[K].append(secs)
            metrics[K].append(eval_metrics(pose, rec.gt, rec.query))
    diams = [r.diameter for r in records]
    return [{"steps": K, "scenes": len(records), **_summary(metrics[K], diams),
             "mean_seconds": float(np.mean(total[K])), "mean_denoise_seconds": float(np.mean(denoise[K]))}
            for K in steps_list]


def linear_fit_r2(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(resid ** 2) / ss_tot) if ss_tot > 0 else 1.0


# -- training helpers -------------------------------------------------------

def overlap_dataset(records: Sequence[SceneRecord], k: int = 16, width: int = OVERLAP_WIDTH,
                    eps_fraction: float = 0.01):
    """Target-side descriptors and overlap labels pooled over scenes.

    Labels come from the ground-truth alignment; descriptors are computed on
    the normalized target alone, so the classifier must tell surface points
    from clutter without seeing the query.
    """
    X, y = [], []
    for rec in records:
        _, yt = overlap_labels(rec.query, PointCloud(rec.target_in_query_frame), eps_fraction)
        tn = PointCloud((rec.target.positions - rec.target.centroid) / rec.normalization.scale,
                        rec.target.normals, normal_valid=rec.target.normal_valid)
        X.append(geometric_descriptors(tn, min(k, len(tn)), width))
        y.append(yt)
    return np.vstack(X), np.concatenate(y)


def build_examples(records: Sequence[SceneRecord], config: PipelineConfig = PipelineConfig()):
    return [encode_scene(r, config).example() for r in records]


def train_model(records: Sequence[SceneRecord], train_config: TrainConfig = TrainConfig(),
                config: PipelineConfig = PipelineConfig()):
    """Train a velocity model on synthetic scenes; returns ``(model, log)``."""
    examples = build_examples(records, config)
    model = MlpVelocityModel(config.overlap_width, train_config.hidden, config.encoding, seed=train_config.seed)
    return train_velocity_model(examples, train_config, model)


# -- symmetry study ---------------------------------------------------------

SYMMETRY_CONDITIONS = {
    "geometry": ("constant", "overlap"),
    "fused": ("regions", "fused"),
}


def symmetric_yaw_modes(pred: RigidTransform, gt: RigidTransform, modes=(0, 90, 180, 270), tol_deg=10.0):
    """Index of the yaw mode about the object z axis the error falls in, or -1."""
    err = gt.rotation.T @ pred.rotation
    for i, m in enumerate(modes):
        if np.degrees(rotation_angle(err, rotation_about_axis([0, 0, 1], np.radians(m)))) < tol_deg:
            return i
    return -1


def relative_gain(new, base) -> float:
    """Percentage improvement of ``new`` over ``base`` (``inf`` when base is 0 and new is not)."""
    if base > 0:
        return 100.0 * (new - base) / base
    return 0.0 if new == base else float("inf")


@dataclass
class SymmetryReport:
    """Per-condition summaries plus the IR gain of fused over geometry-only.

    ``ir_gain`` is relative (percent of the geometry-only IR);
    ``ir_gain_points`` is the plain difference in percentage points.
    """

    conditions: dict = field(default_factory=dict)
    ir_gain: dict = field(default_factory=dict)
    ir_gain_points: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for name, c in self.conditions.items():
            row = {"condition": name, **{k: v for k, v in c.items() if not isinstance(v, (list, dict))}}
            for i, frac in enumerate(c["mode_fractions"]):
                row[f"mode_{(0, 90, 180, 270)[i]}"] = frac
            for tau, ir in c["inlier_ratio"].items():
                row[f"ir_{tau:g}"] = ir
            out.append(row)
        return out


def evaluate_condition(records, model, config: PipelineConfig):
    metrics, modes, irs = [], [], {tau: [] for tau in IR_GRID}
    for rec in records:
        pose, _, diag = estimate_pose(rec, config, model)
        metrics.append(eval_metrics(pose, rec.gt, rec.query))
        modes.append(symmetric_yaw_modes(pose, rec.gt))
        for tau, v in diag["inlier_ratio"].items():
            irs[tau].append(v)
    modes = np.array(modes)
    fractions = [float(np.mean(modes == i)) for i in range(4)]
    summary = _summary(metrics, [r.diameter for r in records])
    return {
        **summary,
        "occupied_modes": int(sum(f >= 0.10 for f in fractions)),
        "mode_fractions": fractions,
        "rotation_errors": [m.rotation_deg for m in metrics],
        "inlier_ratio": {tau: float(np.mean(v)) for tau, v in irs.items()},
    }


def symmetry_scene_spec(texture_pattern: str, shape: str = "cuboid", visibility=1.0, noise_fraction=0.0025,
                        **kw) -> SceneSpec:
    """Quadrant-pose, fully front-visible scenes of ``shape`` with held-out sensor noise.

    Targets are resampled so the query's own sample layout cannot break the
    shape's symmetry.
    """
    spec = SceneSpec(shape=shape, texture=TextureSpec(pattern=texture_pattern, seed=7), pose="quadrant",
                     visibility=visibility, resample=kw.pop("resample", True), **kw)
    return replace(spec, noise=noise_fraction * diameter(query_cloud(shape, spec.query_points)))


def run_symmetry_study(shape="cuboid", n_train=200, n_test=100, train_config: TrainConfig = TrainConfig(),
                       config: PipelineConfig = PipelineConfig(), seed=0, models=None):
    """Train (or reuse) one model per condition on a 4-fold symmetric shape and compare.

    Conditions: ``geometry`` (constant texture, overlap features only) and
    ``fused`` (asymmetric texture, fused features). Both see identical poses,
    seeds and training schedules.
    """
    report = SymmetryReport()
    models = dict(models or {})
    for name, (pattern, mode) in SYMMETRY_CONDITIONS.items():
        cfg = replace(config, feature_mode=mode)
        base = symmetry_scene_spec(pattern, shape)
        if name not in models:
            train = generate_scenes(base, n_train, seed)
            models[name], _ = train_model(train, train_config, cfg)
        test = generate_scenes(base, n_test, seed + 1)
        report.conditions[name] = evaluate_condition(test, models[name], cfg)
    g, f = report.conditions["geometry"], report.conditions["fused"]
    report.ir_gain_points = {tau: f["inlier_ratio"][tau] - g["inlier_ratio"][tau] for tau in IR_GRID}
    report.ir_gain = {tau: relative_gain(f["inlier_ratio"][tau], g["inlier_ratio"][tau]) for tau in IR_GRID}
    return report, models
