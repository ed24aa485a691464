"""Acceptance suite: one verdict line per criterion, printed as the tests run
and repeated in the terminal summary.

The trained-model criteria share session fixtures, so the whole module takes
roughly a quarter of an hour on one CPU core.
"""

import filecmp
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.distance import cdist, pdist

from flowpose import io
from flowpose.cli import main
from flowpose.features import overlap_labels, train_overlap_classifier
from flowpose.flow import FlowState, MlpVelocityModel, OracleVelocityModel, TrainConfig, euler_integrate, \
    gradient_check, make_training_sample
from flowpose.geom import PointCloud, RigidTransform, diameter, random_rotation, rotation_angle
from flowpose.pipeline import (
    IR_GRID,
    PipelineConfig,
    encode_scene,
    estimate_pose,
    eval_metrics,
    linear_fit_r2,
    run_ablation_solvers,
    run_steps_sweep,
    run_symmetry_study,
    overlap_dataset,
    train_model,
)
from flowpose.register import CorrespondenceSet, RansacConfig, kabsch, ransac_register
from flowpose.scenes import SceneSpec, generate_scenes

from oracles import best_sampled_rotation_residual, residual, rotation_error_deg

pytestmark = pytest.mark.acceptance

TRAIN = TrainConfig(epochs=40)


def _noisy_spec(base: SceneSpec, fraction=0.0025) -> SceneSpec:
    diam = generate_scenes(base, 1, 0)[0].diameter
    return replace(base, noise=fraction * diam)


# -- shared trained model ---------------------------------------------------

@pytest.fixture(scope="session")
def trained():
    """L-bracket model trained on partial, noisy scenes; evaluated on 100 held-out scenes."""
    base = _noisy_spec(SceneSpec(shape="L-bracket", visibility=0.7, resample=True))
    train = generate_scenes(base, 200, seed=100)
    test = generate_scenes(base, 100, seed=200)
    cfg = PipelineConfig(steps=50)
    t0 = time.perf_counter()
    model, log = train_model(train, TRAIN, cfg)
    train_seconds = time.perf_counter() - t0
    results = []
    for rec in test:
        pose, _, diag = estimate_pose(rec, cfg, model)
        results.append((eval_metrics(pose, rec.gt, rec.query), rec.diameter, diag["inlier_ratio"]))
    return {"model": model, "log": log, "seconds": train_seconds, "test": test, "results": results, "config": cfg}


@pytest.fixture(scope="session")
def steps_rows(trained):
    return run_steps_sweep(trained["test"], trained["model"], [1, 10, 50], trained["config"])


# -- 1. Kabsch exactness ----------------------------------------------------

def test_c01_kabsch_exactness(verdicts):
    rng = np.random.default_rng(1)
    problems = []
    for _ in range(1000):
        m = int(rng.integers(3, 101))
        src = rng.uniform(-0.1, 0.1, size=(m, 3))
        gt = RigidTransform(random_rotation(rng), rng.uniform(-1.0, 1.0, 3))
        problems.append((src, gt.apply(src), gt))
    t0 = time.perf_counter()
    fits = [kabsch(src, dst) for src, dst, _ in problems]
    seconds = time.perf_counter() - t0
    rot = max(rotation_angle(T.rotation, gt.rotation) for T, (_, _, gt) in zip(fits, problems))
    trans = max(np.linalg.norm(T.translation - gt.translation) for T, (_, _, gt) in zip(fits, problems))
    ok = rot < 1e-7 and trans < 1e-9 and seconds < 1.0
    verdicts.record(1, "Kabsch exactness", ok,
                    f"max rotation {rot:.2e} rad, max translation {trans:.2e} m, {seconds:.3f} s for 1000 problems")
    assert ok


# -- 2. Kabsch optimality ---------------------------------------------------

def test_c02_kabsch_optimality(verdicts):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = -np.inf
    for i in range(100):
        m = int(rng.integers(3, 7))
        src = rng.uniform(-0.05, 0.05, size=(m, 3))
        dst = src @ random_rotation(rng).T + rng.normal(size=(m, 3)) * 0.01
        if i % 10 == 0:
            dst = dst * [-1.0, 1.0, 1.0]  # reflections included
        T = kabsch(src, dst)
        r = residual(T.rotation, T.translation, src, dst)
        brute = best_sampled_rotation_residual(src, dst, 1_000_000, seed=i)
        worst = max(worst, r - brute)
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-6 and seconds < 120
    verdicts.record(2, "Kabsch optimality", ok,
                    f"largest improvement by 10^6 sampled rotations {max(worst, 0.0):.2e} "
                    f"(kabsch minus best sample {worst:.2e}), {seconds:.1f} s")
    assert ok


# -- 3. RANSAC robustness ---------------------------------------------------

def test_c03_ransac_robustness(verdicts):
    t0 = time.perf_counter()
    good = 0
    for trial in range(100):
        rng = np.random.default_rng(3000 + trial)
        src = rng.uniform(-0.1, 0.1, size=(200, 3))
        src *= 0.2 / pdist(src).max()  # 20 cm diameter
        gt = RigidTransform(random_rotation(rng), rng.uniform(-0.1, 0.1, 3))
        dst = gt.apply(src)
        bad = rng.permutation(200)[:120]
        dst[bad] = rng.uniform(-0.5, 0.5, size=(120, 3))
        res = ransac_register(CorrespondenceSet(src, dst), RansacConfig(iterations=1000, threshold=0.01, seed=trial))
        rot = rotation_error_deg(res.transform.rotation, gt.rotation)
        good += rot < 1.0 and np.linalg.norm(res.transform.translation - gt.translation) < 0.002
    seconds = time.perf_counter() - t0
    ok = good >= 99 and seconds < 30
    verdicts.record(3, "RANSAC robustness", ok, f"{good}/100 trials within 1 deg / 2 mm at 60% outliers, {seconds:.1f} s")
    assert ok


# -- 4. solver ordering -----------------------------------------------------

def test_c04_solver_ordering(verdicts):
    base = _noisy_spec(SceneSpec(shape="L-bracket", visibility=0.7))
    recs = generate_scenes(base, 100, seed=41)
    t0 = time.perf_counter()
    rows = {r["variant"]: r["success_rate"]
            for r in run_ablation_solvers(recs, "oracle", PipelineConfig(), contamination=0.3, jitter=0.01)}
    seconds = time.perf_counter() - t0
    svd, ran, best = rows["svd"], rows["ransac"], rows["ransac+icp"]
    ok = best >= ran >= svd and best - svd >= 10 and seconds < 300
    verdicts.record(4, "solver ordering", ok,
                    "success svd {svd:.0f}%, svd+icp {si:.0f}%, ransac {ran:.0f}%, ransac+icp {best:.0f}% "
                    "(30% injected outliers, 1% diameter jitter), {s:.0f} s".format(
                        svd=svd, si=rows["svd+icp"], ran=ran, best=best, s=seconds))
    assert ok


# -- 5. oracle integration ---------------------------------------------------

def test_c05_oracle_integration(verdicts):
    rng = np.random.default_rng(5)
    n_q, n_t = 512, 300
    X0 = rng.uniform(-0.5, 0.5, size=(n_q + n_t, 3))
    X1 = X0.copy()
    X1[n_q:] = rng.normal(0.0, 0.5, size=(n_t, 3))
    anchor = np.arange(n_q + n_t) < n_q
    t0 = time.perf_counter()
    errs, same = {}, True
    for K in (1, 5, 50):
        state = euler_integrate(OracleVelocityModel(X0), FlowState.start(X1, anchor), None, K)
        errs[K] = float(np.max(np.abs(state.positions[n_q:] - X0[n_q:])))
        same &= state.positions[:n_q].tobytes() == X1[:n_q].tobytes()
    seconds = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-9 and same and seconds < 1.0
    verdicts.record(5, "oracle-field integration", ok,
                    ", ".join(f"K={K} err {e:.1e}" for K, e in errs.items())
                    + f", anchors bit-identical: {same}, {seconds:.3f} s")
    assert ok


# -- 6. gradient check --------------------------------------------------------

def test_c06_gradient_check(verdicts):
    base = SceneSpec(shape="L-bracket")
    rec = generate_scenes(base, 1, seed=6)[0]
    enc = encode_scene(rec, PipelineConfig())
    model = MlpVelocityModel(64, 128, seed=6)
    t0 = time.perf_counter()
    sample = make_training_sample(enc.query, enc.target_r, enc.conditioning, 0.5, seed=6)
    err = gradient_check(model, sample, epsilon=1e-5, n_params=300, seed=6)
    seconds = time.perf_counter() - t0
    ok = err < 1e-4 and seconds < 60
    verdicts.record(6, "gradient correctness", ok,
                    f"max relative error {err:.2e} over 300 parameters ({model.n_params} total), {seconds:.1f} s")
    assert ok


# -- 7. trained end to end ---------------------------------------------------

def test_c07_trained_end_to_end(verdicts, trained):
    ok_scenes = [m.success(d) for m, d, _ in trained["results"]]
    rate = 100.0 * np.mean(ok_scenes)
    minutes = trained["seconds"] / 60
    ok = rate >= 90 and minutes <= 30
    verdicts.record(7, "trained end-to-end", ok,
                    f"{rate:.0f}% of 100 held-out scenes within 5 deg / 5% diameter (K=50, RANSAC+ICP); "
                    f"training {minutes:.1f} min, final loss {trained['log'].losses[-1]:.4f}")
    assert ok


# -- 8. inlier ratio ----------------------------------------------------------

def test_c08_inlier_ratio_thresholds(verdicts, trained):
    ir = [float(np.mean([r[2][tau] for r in trained["results"]])) for tau in IR_GRID]
    monotone = all(b >= a for a, b in zip(ir, ir[1:]))
    per_scene = all(np.all(np.diff([r[2][t] for t in IR_GRID]) >= 0) for r in trained["results"])
    ok = monotone and per_scene and ir[-1] - ir[0] >= 20
    verdicts.record(8, "IR threshold sensitivity", ok,
                    "mean IR " + ", ".join(f"{100 * t:g}%: {v:.1f}" for t, v in zip(IR_GRID, ir))
                    + f"; spread {ir[-1] - ir[0]:.1f} points")
    assert ok


# -- 9. symmetry --------------------------------------------------------------

@pytest.fixture(scope="session")
def symmetry():
    return run_symmetry_study("cuboid", n_train=200, n_test=100, train_config=TRAIN, seed=0)[0]


def test_c09_symmetry_disambiguation(verdicts, symmetry):
    g, f = symmetry.conditions["geometry"], symmetry.conditions["fused"]
    gap = f["success_rate"] - g["success_rate"]
    ok = g["occupied_modes"] >= 2 and f["median_rotation_deg"] < 5 and gap >= 15
    verdicts.record(9, "symmetry disambiguation", ok,
                    f"geometry-only modes {g['occupied_modes']} (fractions "
                    + "/".join(f"{x:.2f}" for x in g["mode_fractions"])
                    + f"), success {g['success_rate']:.0f}%; fused median {f['median_rotation_deg']:.2f} deg, "
                    f"success {f['success_rate']:.0f}% (+{gap:.0f} points)")
    assert ok


def test_symmetry_ir_gain_is_largest_at_strictest_tau(symmetry):
    gains = [symmetry.ir_gain[t] for t in IR_GRID]
    print("relative IR gain of fused over geometry-only:",
          ", ".join(f"{100 * t:g}%: {v:+.0f}%" for t, v in zip(IR_GRID, gains)))
    assert gains[0] == max(gains)


# -- 10. steps sweep -----------------------------------------------------------

def test_c10_steps_sweep(verdicts, steps_rows):
    s = [r["success_rate"] for r in steps_rows]
    secs = [r["mean_seconds"] for r in steps_rows]
    r2 = linear_fit_r2([r["steps"] for r in steps_rows], secs)
    ok = s[1] >= s[0] - 1 and s[2] >= s[1] - 1 and r2 > 0.99
    verdicts.record(10, "steps sweep", ok,
                    "success K=1/10/50: " + "/".join(f"{x:.0f}%" for x in s)
                    + "; seconds per scene " + "/".join(f"{x:.3f}" for x in secs) + f"; R^2 {r2:.4f}")
    assert ok


# -- 11. overlap labels and classifier ------------------------------------------

def test_c11_overlap_labels_and_classifier(verdicts):
    base = SceneSpec(shape="L-bracket", outliers=0.3, noise=0.0004)
    pairs = generate_scenes(base, 50, seed=111)
    exact = 0
    for rec in pairs:
        Q, T_r = rec.query.positions, rec.target_in_query_frame
        eps = 0.01 * pdist(Q).max()
        D = cdist(Q, T_r)
        lq, lt = overlap_labels(rec.query, PointCloud(T_r))
        exact += np.array_equal(lq, D.min(axis=1) <= eps) and np.array_equal(lt, D.min(axis=0) <= eps)
    X, y = overlap_dataset(generate_scenes(base, 40, seed=31))
    Xh, yh = overlap_dataset(generate_scenes(base, 20, seed=32))
    clf = train_overlap_classifier(X, y)
    acc = 100.0 * np.mean(clf.predict(Xh) == yh)
    majority = 100.0 * max(yh.mean(), 1 - yh.mean())
    ok = exact == 50 and acc > 90
    verdicts.record(11, "overlap labels and classifier", ok,
                    f"labels exact on {exact}/50 pairs; held-out accuracy {acc:.1f}% (majority class {majority:.1f}%)")
    assert ok


def test_diameter_matches_brute_force_for_label_scale():
    rec = generate_scenes(SceneSpec(shape="L-bracket"), 1, seed=111)[0]
    assert diameter(rec.query) == pytest.approx(pdist(rec.query.positions).max(), rel=1e-12)


# -- 12. CLI determinism ---------------------------------------------------------

def _cli_session(root):
    root.mkdir()
    small = TrainConfig(steps_per_epoch=10, batch_size=4, rows_per_sample=128, hidden=32)
    io.write_config(root / "train.txt", small, "train")
    io.write_scene_spec(root / "spec.txt", SceneSpec(shape="blob", noise=0.0005))
    data, models = root / "data", root / "models"
    codes = [main(["gen", "--spec", str(root / "spec.txt"), "--out", str(data), "--count", "30", "--seed", "12"])]
    for mode in ("fused", "overlap", "appearance"):
        codes.append(main(["train", "--data", str(data), "--out", str(models / f"{mode}.ckpt"), "--epochs", "2",
                           "--seed", "12", "--train-config", str(root / "train.txt"), "--feature-mode", mode]))
    scenes = sorted(p for p in data.glob("scene_*.txt") if p.name.count(".") == 1)
    for scene in scenes[:5]:
        codes.append(main(["estimate", "--model", str(models / "fused.ckpt"), "--scene", str(scene),
                           "--steps", "10", "--seed", "12", "--out", str(root / "pred" / (scene.stem + ".json"))]))
    codes.append(main(["eval", "--pred", str(root / "pred"), "--gt", str(data), "--out", str(root / "eval.csv")]))
    codes.append(main(["ablate", "--suite", "steps", "--data", str(data), "--model", str(models / "fused.ckpt"),
                       "--out", str(root / "steps.csv"), "--steps-list", "1,5", "--seed", "12"]))
    codes.append(main(["ablate", "--suite", "solvers", "--data", str(data), "--model", "oracle",
                       "--out", str(root / "solvers.csv"), "--contamination", "0.3", "--seed", "12"]))
    codes.append(main(["ablate", "--suite", "features", "--data", str(data), "--model", str(models),
                       "--out", str(root / "features.csv"), "--seed", "12"]))
    return codes


def test_c12_cli_determinism(verdicts, tmp_path):
    codes_a = _cli_session(tmp_path / "a")
    codes_b = _cli_session(tmp_path / "b")
    files = sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and ".timing." not in p.name)
    files_b = sorted(str(p.relative_to(tmp_path / "b")) for p in (tmp_path / "b").rglob("*")
                     if p.is_file() and ".timing." not in p.name)
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    ok = codes_a == codes_b == [0] * len(codes_a) and files == files_b and not mismatch and not errors
    verdicts.record(12, "CLI determinism", ok,
                    f"{len(codes_a)} commands (gen, train x3, estimate x5, eval, ablate x3) run twice; "
                    f"{len(files) - len(mismatch)}/{len(files)} result files byte-identical")
    assert ok
