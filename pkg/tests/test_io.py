import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from flowpose import io
from flowpose.errors import ParseError
from flowpose.features import ConditioningMatrix, TextureSpec, pca_fit
from flowpose.flow import MlpVelocityModel, TrainConfig, TrainLog
from flowpose.geom import PointCloud, random_rotation
from flowpose.pipeline import PipelineConfig
from flowpose.register import CorrespondenceSet, RansacConfig, ransac_register
from flowpose.scenes import DEFAULT_INTRINSICS, SceneSpec, generate_scene

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def _same_scene(a, b):
    assert a.spec == b.spec
    for x, y in [(a.query.positions, b.query.positions), (a.query.normals, b.query.normals),
                 (a.target.positions, b.target.positions), (a.target.normals, b.target.normals),
                 (a.target.normal_valid, b.target.normal_valid), (a.source_index, b.source_index),
                 (a.gt.matrix, b.gt.matrix), (a.normalization.center, b.normalization.center)]:
        assert np.asarray(x).tobytes() == np.asarray(y).tobytes()
    assert a.normalization.scale == b.normalization.scale


# -- scenes and clouds ------------------------------------------------------

def test_scene_round_trip_is_bit_exact(tmp_path):
    rec = generate_scene(SceneSpec(shape="blob", noise=0.001, outliers=0.2, seed=3, depth=True))
    io.save_scene(tmp_path / "s.txt", rec)
    back = io.load_scene(tmp_path / "s.txt")
    _same_scene(rec, back)
    assert back.intrinsics == rec.intrinsics
    assert back.depth.tobytes() == rec.depth.tobytes()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["s.depth", "s.query.ply", "s.target.ply", "s.txt"]


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=20))
def test_ply_round_trip_arbitrary_floats(tmp_path, rows):
    cloud = PointCloud(np.array(rows))
    io.write_ply(tmp_path / "c.ply", cloud)
    assert io.read_ply(tmp_path / "c.ply").positions.tobytes() == cloud.positions.tobytes()


def test_ply_truncated(tmp_path):
    rec = generate_scene(SceneSpec(shape="cube", seed=1))
    p = tmp_path / "c.ply"
    io.write_ply(p, rec.target, rec.source_index)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(ParseError, match="expected .* vertices"):
        io.read_ply(p)


@pytest.mark.parametrize("text,where", [
    ("plx\n", "line 1"),
    ("ply\nformat binary_little_endian 1.0\n", "line 2"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\n", "line"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\n"
     "end_header\n1 2 oops\n", "line 8"),
])
def test_ply_malformed(tmp_path, text, where):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(ParseError, match=where):
        io.read_ply(p)


def test_scene_missing_key_and_bad_header(tmp_path):
    rec = generate_scene(SceneSpec(shape="cube", seed=1))
    io.save_scene(tmp_path / "s.txt", rec)
    text = (tmp_path / "s.txt").read_text()
    (tmp_path / "s.txt").write_text("\n".join(l for l in text.splitlines() if not l.startswith("gt.rotation")))
    with pytest.raises(ParseError, match="gt.rotation"):
        io.load_scene(tmp_path / "s.txt")
    (tmp_path / "s.txt").write_text(text.replace("v1", "v9", 1))
    with pytest.raises(ParseError, match="version"):
        io.load_scene(tmp_path / "s.txt")
    (tmp_path / "s.txt").write_text(text.replace("spec.shape = cube", "spec.shape = torus"))
    with pytest.raises(ParseError):
        io.load_scene(tmp_path / "s.txt")


# -- configs ----------------------------------------------------------------

def test_config_round_trips(tmp_path):
    cfg = PipelineConfig(steps=7, feature_mode="overlap", ransac=RansacConfig(iterations=12, seed=3),
                         model_path="m.ckpt", seed=9)
    io.write_config(tmp_path / "p.txt", cfg, "pipeline")
    assert io.read_config(tmp_path / "p.txt", PipelineConfig, "pipeline") == cfg
    tc = TrainConfig(epochs=3, learning_rate=0.1 + 0.2, optimizer="sgd", lr_decay=False)
    io.write_config(tmp_path / "t.txt", tc, "train")
    assert io.read_config(tmp_path / "t.txt", TrainConfig, "train") == tc
    spec = SceneSpec(shape="cuboid", texture=TextureSpec(pattern="regions", seed=7), noise=1e-4, resample=True)
    io.write_scene_spec(tmp_path / "s.txt", spec)
    assert io.read_scene_spec(tmp_path / "s.txt") == spec
    io.write_texture(tmp_path / "x.txt", spec.texture)
    assert io.read_texture(tmp_path / "x.txt") == spec.texture
    io.write_intrinsics(tmp_path / "i.txt", DEFAULT_INTRINSICS)
    assert io.read_intrinsics(tmp_path / "i.txt") == DEFAULT_INTRINSICS


def test_config_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "p.txt").write_text("# flowpose pipeline v1\nsteps = 10\nransac.threshold = 0.02\n")
    cfg = io.read_config(tmp_path / "p.txt", PipelineConfig, "pipeline")
    assert cfg.steps == 10 and cfg.ransac.threshold == 0.02 and cfg.k == PipelineConfig().k


@pytest.mark.parametrize("body,match", [
    ("stepz = 10\n", "line 2.*unknown key"),
    ("steps = ten\n", "line 2"),
    ("steps 10\n", "line 2"),
    ("feature_mode = both\n", "feature_mode"),
])
def test_config_errors(tmp_path, body, match):
    (tmp_path / "p.txt").write_text("# flowpose pipeline v1\n" + body)
    with pytest.raises(ParseError, match=match):
        io.read_config(tmp_path / "p.txt", PipelineConfig, "pipeline")


def test_config_wrong_kind(tmp_path):
    io.write_config(tmp_path / "t.txt", TrainConfig(), "train")
    with pytest.raises(ParseError, match="line 1"):
        io.read_config(tmp_path / "t.txt", PipelineConfig, "pipeline")


# -- binary blobs and checkpoints -------------------------------------------

def test_feature_matrix_pca_and_depth_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    F = rng.normal(size=(40, 16))
    io.write_feature_matrix(tmp_path / "f.bin", F)
    assert io.read_feature_matrix(tmp_path / "f.bin").tobytes() == F.tobytes()
    basis = pca_fit(F, 5)
    io.write_pca_basis(tmp_path / "b.bin", basis)
    back = io.read_pca_basis(tmp_path / "b.bin")
    for k in ("mean", "components", "explained_variance"):
        assert getattr(back, k).tobytes() == getattr(basis, k).tobytes()
    D = rng.uniform(0.5, 1.0, size=(6, 8))
    D[0, 0] = 0.0
    io.write_depth(tmp_path / "d.bin", D)
    assert io.read_depth(tmp_path / "d.bin").tobytes() == D.tobytes()


def _probe(model):
    rng = np.random.default_rng(5)
    C = ConditioningMatrix(rng.normal(size=(30, model.feature_width)), rng.normal(size=(30, 10)))
    return model.velocity(0.4, rng.normal(size=(30, 3)), C)


def test_checkpoint_round_trip_probe_equality(tmp_path):
    model = MlpVelocityModel(feature_width=64, hidden=32, seed=4)
    io.save_model(tmp_path / "m.ckpt", model)
    back = io.load_model(tmp_path / "m.ckpt")
    assert back.input_width == model.input_width and back.hidden == model.hidden
    assert _probe(back).tobytes() == _probe(model).tobytes()


@pytest.mark.parametrize("cut", [10, 200, -1])
def test_truncated_checkpoint_reports_offset(tmp_path, cut):
    io.save_model(tmp_path / "m.ckpt", MlpVelocityModel(feature_width=8, hidden=8))
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:cut])
    with pytest.raises(ParseError) as info:
        io.load_model(tmp_path / "t.ckpt")
    assert "line" in str(info.value) or "offset" in str(info.value)


def test_checkpoint_trailing_bytes(tmp_path):
    io.save_model(tmp_path / "m.ckpt", MlpVelocityModel(feature_width=8, hidden=8))
    with open(tmp_path / "m.ckpt", "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(ParseError, match="offset"):
        io.load_model(tmp_path / "m.ckpt")


# -- results ----------------------------------------------------------------

def test_registration_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    src = rng.normal(size=(50, 3)) * 0.05
    R = random_rotation(rng)
    res = ransac_register(CorrespondenceSet(src, src @ R.T + 0.1), RansacConfig(iterations=30, seed=5))
    io.write_registration(tmp_path / "r.json", res, RansacConfig(iterations=30, seed=5))
    doc = io.read_registration(tmp_path / "r.json")
    assert doc["transform"].matrix.tobytes() == res.transform.matrix.tobytes()
    assert doc["inlier_count"] == res.inlier_count
    assert doc["seed"] == 5
    with pytest.raises(ParseError):
        io.read_json(tmp_path / "r.json", "estimate")


def test_truncated_json(tmp_path):
    io.write_json(tmp_path / "a.json", "estimate", {"x": 1.5})
    text = (tmp_path / "a.json").read_text()
    (tmp_path / "a.json").write_text(text[: len(text) // 2])
    with pytest.raises(ParseError, match="line"):
        io.read_json(tmp_path / "a.json", "estimate")


def test_csv_round_trip_with_echo(tmp_path):
    rows = [{"variant": "svd", "success_rate": 1 / 3}, {"variant": "ransac", "success_rate": 100.0}]
    io.write_csv(tmp_path / "t.csv", "ablate", rows, config=PipelineConfig(seed=4), seed=4)
    back, echo = io.read_csv(tmp_path / "t.csv", "ablate")
    assert [float(r["success_rate"]) for r in back] == [1 / 3, 100.0]
    assert echo["seed"] == "4" and echo["ransac.iterations"] == "1000"


def test_training_log_splits_timing(tmp_path):
    log = TrainLog()
    log.append(0, 0.5, 1.25)
    log.append(1, 0.25, 2.5)
    io.write_training_log(tmp_path / "l.csv", log, tmp_path / "l.timing.csv")
    rows, _ = io.read_csv(tmp_path / "l.csv", "train-log")
    assert list(rows[0]) == ["epoch", "loss"]
    timing, _ = io.read_csv(tmp_path / "l.timing.csv", "train-timing")
    assert [float(r["seconds"]) for r in timing] == [1.25, 2.5]
