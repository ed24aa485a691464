"""File formats: ASCII PLY clouds, key-value configs, binary arrays with a
text header, model checkpoints, scene records, JSON results and CSV tables.

Every format starts with a versioned header line. Floats are written with
17 significant digits so a write/read cycle is exact. Readers either return
a complete object or raise :class:`ParseError` with the line (text) or byte
offset (binary) of the first problem.
"""

from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import math
from pathlib import Path

import numpy as np

from .errors import FlowposeError, ParseError
from .features import EncodingConfig, PcaBasis, TextureSpec
from .flow import PARAM_ORDER, MlpVelocityModel
from .geom import NormalizationRecord, PinholeIntrinsics, PointCloud, RigidTransform
from .register import RansacConfig, RegistrationResult
from .scenes import SceneRecord, SceneSpec

FORMAT_VERSION = 1
_MAGIC = "flowpose"


def _header(kind: str) -> str:
    return f"# {_MAGIC} {kind} v{FORMAT_VERSION}"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _check_header(line: str, kind: str, path, lineno=1):
    expected = f"# {_MAGIC} {kind} v"
    if not line.startswith(expected):
        raise ParseError(f"expected header {expected!r}", path, line=lineno)
    version = line[len(expected):].strip()
    if version != str(FORMAT_VERSION):
        raise ParseError(f"unsupported {kind} version {version!r}", path, line=lineno)


def _read_text(path) -> list:
    try:
        return Path(path).read_text().splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("file is not text", path, offset=exc.start) from None


# -- point clouds -----------------------------------------------------------

def write_ply(path, cloud: PointCloud, source_index=None):
    """ASCII PLY with ``x y z``, optional ``nx ny nz`` (plus a ``valid`` flag) and ``src``."""
    cols = [cloud.positions]
    props = ["double x", "double y", "double z"]
    ints = []
    if cloud.normals is not None:
        cols.append(cloud.normals)
        props += ["double nx", "double ny", "double nz"]
        if cloud.normal_valid is not None:
            ints.append(cloud.normal_valid.astype(np.int64))
            props.append("int valid")
    if source_index is not None:
        ints.append(np.asarray(source_index, dtype=np.int64))
        props.append("int src")
    lines = ["ply", "format ascii 1.0", f"comment {_MAGIC} cloud v{FORMAT_VERSION}",
             f"element vertex {len(cloud)}"]
    lines += [f"property {p}" for p in props]
    lines.append("end_header")
    floats = np.hstack(cols)
    for i in range(len(cloud)):
        row = [repr(float(v)) for v in floats[i]] + [str(int(c[i])) for c in ints]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path, with_source: bool = False):
    """Inverse of :func:`write_ply`; returns the cloud (and ``src`` column when asked)."""
    lines = _read_text(path)
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, line=1)
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise ParseError("only 'format ascii 1.0' is supported", path, line=2)
    n = None
    props = []
    i = 2
    while True:
        if i >= len(lines):
            raise ParseError("header not terminated by end_header", path, line=i)
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "element" and len(tok) == 3 and tok[1] == "vertex":
            try:
                n = int(tok[2])
            except ValueError:
                raise ParseError("bad vertex count", path, line=i) from None
        elif tok[0] == "property" and len(tok) == 3:
            props.append(tok[2])
        else:
            raise ParseError(f"unexpected header line {lines[i - 1]!r}", path, line=i)
    if n is None or n < 0:
        raise ParseError("missing vertex element", path, line=i)
    if props[:3] != ["x", "y", "z"]:
        raise ParseError("first properties must be x y z", path, line=i)
    body = lines[i:i + n]
    if len(body) < n:
        raise ParseError(f"expected {n} vertices, found {len(body)}", path, line=len(lines) + 1)
    data = np.empty((n, len(props)))
    for r, text in enumerate(body):
        tok = text.split()
        if len(tok) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tok)}", path, line=i + r + 1)
        try:
            data[r] = [float(t) for t in tok]
        except ValueError:
            raise ParseError("non-numeric value", path, line=i + r + 1) from None
    col = {p: k for k, p in enumerate(props)}
    normals = valid = src = None
    if "nx" in col:
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    if "valid" in col:
        valid = data[:, col["valid"]].astype(bool)
    if "src" in col:
        src = data[:, col["src"]].astype(np.int64)
    try:
        cloud = PointCloud(data[:, :3], normals, normal_valid=valid)
    except FlowposeError as exc:
        raise ParseError(str(exc), path) from None
    return (cloud, src) if with_source else cloud


# -- key-value configs ------------------------------------------------------

def flatten_config(obj, prefix="") -> dict:
    """Dataclass (possibly nested) to an ordered ``dotted.key -> value`` dict."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten_config(v, key + "."))
        else:
            out[key] = v
    return out


def _convert(text, default, key, path, lineno):
    try:
        if isinstance(default, bool):
            if text not in ("true", "false"):
                raise ValueError
            return text == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ParseError(f"bad value {text!r} for {key}", path, line=lineno) from None
    if default is None:
        return None if text == "none" else text
    return text


def _build(cls, values: dict, path, prefix=""):
    template = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = getattr(template, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), values, path, key + ".")
        elif key in values:
            text, lineno = values.pop(key)
            kwargs[f.name] = _convert(text, default, key, path, lineno)
    return cls(**kwargs)


def config_text(obj, kind: str) -> str:
    lines = [_header(kind)]
    for k, v in flatten_config(obj).items():
        lines.append(f"{k} = {'none' if v is None else _fmt(v)}")
    return "\n".join(lines) + "\n"


def write_config(path, obj, kind: str):
    Path(path).write_text(config_text(obj, kind))


def read_config(path, cls, kind: str):
    """Read a key-value file into ``cls``; missing keys keep their defaults."""
    lines = _read_text(path)
    if not lines:
        raise ParseError("empty file", path, line=1)
    _check_header(lines[0], kind, path)
    values = {}
    for n, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ParseError(f"expected 'key = value', got {s!r}", path, line=n)
        k, v = (p.strip() for p in s.split("=", 1))
        values[k] = (v, n)
    try:
        obj = _build(cls, values, path)
    except ParseError:
        raise
    except FlowposeError as exc:
        raise ParseError(str(exc), path) from None
    if values:
        key, (_, n) = next(iter(values.items()))
        raise ParseError(f"unknown key {key!r}", path, line=n)
    return obj


def write_scene_spec(path, spec: SceneSpec):
    write_config(path, spec, "scene-spec")


def read_scene_spec(path) -> SceneSpec:
    return read_config(path, SceneSpec, "scene-spec")


def write_texture(path, texture: TextureSpec):
    write_config(path, texture, "texture")


def read_texture(path) -> TextureSpec:
    return read_config(path, TextureSpec, "texture")


def write_intrinsics(path, intr: PinholeIntrinsics):
    write_config(path, intr, "intrinsics")


def read_intrinsics(path) -> PinholeIntrinsics:
    lines = _read_text(path)
    if not lines:
        raise ParseError("empty file", path, line=1)
    _check_header(lines[0], "intrinsics", path)
    vals = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, line=n)
        k, v = (p.strip() for p in line.split("=", 1))
        vals[k] = (v, n)
    out = {}
    for key, typ in (("fx", float), ("fy", float), ("cx", float), ("cy", float), ("width", int), ("height", int)):
        if key not in vals:
            raise ParseError(f"missing key {key!r}", path, line=len(lines))
        try:
            out[key] = typ(vals[key][0])
        except ValueError:
            raise ParseError(f"bad value for {key}", path, line=vals[key][1]) from None
    try:
        return PinholeIntrinsics(**out)
    except FlowposeError as exc:
        raise ParseError(str(exc), path) from None


# -- binary arrays with a text header ---------------------------------------

def _write_blob(path, kind: str, meta: dict, arrays: dict):
    lines = [_header(kind)]
    lines += [f"{k} {_fmt(v)}" for k, v in meta.items()]
    for name, a in arrays.items():
        lines.append(f"array {name} {' '.join(str(s) for s in np.shape(a)) or 'scalar'}")
    lines.append("end_header")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + blob)


def _read_blob(path, kind: str):
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError("header not terminated by end_header", path, offset=len(raw))
    try:
        head = raw[:end].decode().splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("header is not text", path, offset=exc.start) from None
    if not head:
        raise ParseError("empty header", path, line=1)
    _check_header(head[0], kind, path)
    meta, shapes = {}, []
    for n, line in enumerate(head[1:], start=2):
        tok = line.split()
        if len(tok) < 2:
            raise ParseError(f"bad header line {line!r}", path, line=n)
        if tok[0] == "array":
            try:
                shape = () if tok[2:] == ["scalar"] else tuple(int(t) for t in tok[2:])
            except ValueError:
                raise ParseError("bad array shape", path, line=n) from None
            shapes.append((tok[1], shape))
        else:
            meta[tok[0]] = " ".join(tok[1:])
    pos = end + len(b"end_header\n")
    arrays = {}
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        stop = pos + 8 * count
        if stop > len(raw):
            raise ParseError(f"truncated data for array {name!r}", path, offset=len(raw))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = stop
    if pos != len(raw):
        raise ParseError(f"{len(raw) - pos} trailing bytes after data", path, offset=pos)
    return meta, arrays


def _meta_int(meta, key, path):
    try:
        return int(meta[key])
    except (KeyError, ValueError):
        raise ParseError(f"missing or bad header field {key!r}", path) from None


def write_feature_matrix(path, F):
    F = np.asarray(F, dtype=np.float64)
    _write_blob(path, "features", {"rows": F.shape[0], "cols": F.shape[1]}, {"data": F})


def read_feature_matrix(path) -> np.ndarray:
    meta, arrays = _read_blob(path, "features")
    n, d = _meta_int(meta, "rows", path), _meta_int(meta, "cols", path)
    if "data" not in arrays or arrays["data"].shape != (n, d):
        raise ParseError("data shape does not match rows/cols", path)
    return arrays["data"]


def write_pca_basis(path, basis: PcaBasis):
    _write_blob(path, "pca", {"rows": basis.width, "cols": basis.input_width},
                {"components": basis.components, "mean": basis.mean, "variance": basis.explained_variance})


def read_pca_basis(path) -> PcaBasis:
    meta, arrays = _read_blob(path, "pca")
    k, d = _meta_int(meta, "rows", path), _meta_int(meta, "cols", path)
    try:
        comp, mean, var = arrays["components"], arrays["mean"], arrays["variance"]
    except KeyError as exc:
        raise ParseError(f"missing array {exc.args[0]!r}", path) from None
    if comp.shape != (k, d) or mean.shape != (d,) or var.shape != (k,):
        raise ParseError("array shapes inconsistent with header", path)
    return PcaBasis(mean, comp, var)


def write_depth(path, depth):
    depth = np.asarray(depth, dtype=np.float64)
    _write_blob(path, "depth", {"width": depth.shape[1], "height": depth.shape[0]}, {"depth": depth})


def read_depth(path) -> np.ndarray:
    meta, arrays = _read_blob(path, "depth")
    w, h = _meta_int(meta, "width", path), _meta_int(meta, "height", path)
    if "depth" not in arrays or arrays["depth"].shape != (h, w):
        raise ParseError("depth grid shape does not match width/height", path)
    return arrays["depth"]


def save_model(path, model: MlpVelocityModel):
    """Checkpoint: layer sizes, encoding, seed and version in the header, float64 parameters after."""
    meta = {
        "feature_width": model.feature_width,
        "hidden": model.hidden,
        "input_width": model.input_width,
        "frequencies": model.encoding.frequencies,
        "attribute_width": model.encoding.attribute_width,
        "seed": model.seed if model.seed is not None else -1,
    }
    _write_blob(path, "checkpoint", meta, {k: model.params[k] for k in PARAM_ORDER})


def load_model(path) -> MlpVelocityModel:
    meta, arrays = _read_blob(path, "checkpoint")
    enc = EncodingConfig(_meta_int(meta, "frequencies", path), _meta_int(meta, "attribute_width", path))
    seed = _meta_int(meta, "seed", path)
    missing = [k for k in PARAM_ORDER if k not in arrays]
    if missing:
        raise ParseError(f"missing parameters {missing}", path)
    model = MlpVelocityModel(_meta_int(meta, "feature_width", path), _meta_int(meta, "hidden", path), enc,
                             seed=None if seed < 0 else seed, params=arrays)
    expected = MlpVelocityModel.zeros(feature_width=model.feature_width, hidden=model.hidden, encoding=enc)
    for k in PARAM_ORDER:
        if arrays[k].shape != expected.params[k].shape:
            raise ParseError(f"parameter {k} has shape {arrays[k].shape}, expected {expected.params[k].shape}",
                             path)
    return model


# -- scene records ----------------------------------------------------------

def save_scene(path, record: SceneRecord):
    """Scene text file plus sibling ``.query.ply`` / ``.target.ply`` (and ``.depth``) files."""
    path = Path(path)
    stem = path.name[:-len(path.suffix)] if path.suffix else path.name
    q_name, t_name = f"{stem}.query.ply", f"{stem}.target.ply"
    write_ply(path.parent / q_name, record.query)
    write_ply(path.parent / t_name, record.target, record.source_index)
    lines = [_header("scene")]
    lines += [f"spec.{k} = {'none' if v is None else _fmt(v)}" for k, v in flatten_config(record.spec).items()]
    lines.append("gt.rotation = " + " ".join(_fmt(v) for v in record.gt.rotation.ravel()))
    lines.append("gt.translation = " + " ".join(_fmt(v) for v in record.gt.translation))
    lines.append("normalization.center = " + " ".join(_fmt(v) for v in record.normalization.center))
    lines.append(f"normalization.scale = {_fmt(record.normalization.scale)}")
    lines.append(f"query = {q_name}")
    lines.append(f"target = {t_name}")
    if record.intrinsics is not None:
        lines += [f"intrinsics.{k} = {_fmt(v)}" for k, v in dataclasses.asdict(record.intrinsics).items()]
    if record.depth is not None:
        d_name = f"{stem}.depth"
        write_depth(path.parent / d_name, record.depth)
        lines.append(f"depth = {d_name}")
    path.write_text("\n".join(lines) + "\n")


def _floats(text, count, key, path, lineno):
    try:
        vals = [float(t) for t in text.split()]
    except ValueError:
        raise ParseError(f"non-numeric value in {key}", path, line=lineno) from None
    if len(vals) != count:
        raise ParseError(f"{key} needs {count} values, got {len(vals)}", path, line=lineno)
    return np.array(vals)


def load_scene(path) -> SceneRecord:
    path = Path(path)
    lines = _read_text(path)
    if not lines:
        raise ParseError("empty file", path, line=1)
    _check_header(lines[0], "scene", path)
    vals = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, line=n)
        k, v = (p.strip() for p in line.split("=", 1))
        vals[k] = (v, n)
    required = ("gt.rotation", "gt.translation", "normalization.center", "normalization.scale", "query", "target")
    for key in required:
        if key not in vals:
            raise ParseError(f"missing key {key!r}", path, line=len(lines))
    spec_vals = {k[5:]: v for k, v in vals.items() if k.startswith("spec.")}
    try:
        spec = _build(SceneSpec, spec_vals, path)
    except ParseError:
        raise
    except FlowposeError as exc:
        raise ParseError(str(exc), path) from None
    if spec_vals:
        key, (_, n) = next(iter(spec_vals.items()))
        raise ParseError(f"unknown key 'spec.{key}'", path, line=n)
    R = _floats(vals["gt.rotation"][0], 9, "gt.rotation", path, vals["gt.rotation"][1]).reshape(3, 3)
    t = _floats(vals["gt.translation"][0], 3, "gt.translation", path, vals["gt.translation"][1])
    c = _floats(vals["normalization.center"][0], 3, "normalization.center", path, vals["normalization.center"][1])
    s = _floats(vals["normalization.scale"][0], 1, "normalization.scale", path, vals["normalization.scale"][1])[0]
    query = read_ply(path.parent / vals["query"][0])
    target, src = read_ply(path.parent / vals["target"][0], with_source=True)
    if src is None:
        raise ParseError("target cloud lacks the src property", path.parent / vals["target"][0])
    intr = None
    if "intrinsics.fx" in vals:
        try:
            intr = PinholeIntrinsics(**{k: (int if k in ("width", "height") else float)(vals[f"intrinsics.{k}"][0])
                                        for k in ("fx", "fy", "cx", "cy", "width", "height")})
        except (KeyError, ValueError, FlowposeError) as exc:
            raise ParseError(f"bad intrinsics: {exc}", path) from None
    depth = read_depth(path.parent / vals["depth"][0]) if "depth" in vals else None
    try:
        gt = RigidTransform(R, t)
        norm = NormalizationRecord(c, s)
    except FlowposeError as exc:
        raise ParseError(str(exc), path) from None
    return SceneRecord(spec, query, target, gt, src, norm, intr, depth)


# -- results ----------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def transform_to_dict(T: RigidTransform) -> dict:
    return {"rotation": T.rotation.ravel().tolist(), "translation": T.translation.tolist()}


def transform_from_dict(d) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                          np.array(d["translation"], dtype=np.float64))


def registration_to_dict(result: RegistrationResult, config=None) -> dict:
    out = {
        **transform_to_dict(result.transform),
        "inlier_count": result.inlier_count,
        "correspondences": int(len(result.inlier_mask)),
        "residual_rms": result.residual_rms,
        "best_iteration": result.best_iteration,
        "hypotheses": result.hypotheses,
        "seed": result.seed,
        "threshold": result.threshold,
    }
    if config is not None:
        out["config"] = flatten_config(config)
    return out


def write_json(path, kind: str, payload: dict):
    """JSON with ``format`` / ``version`` keys first, stable key order and exact floats."""
    doc = {"format": f"{_MAGIC}-{kind}", "version": FORMAT_VERSION, **_jsonable(payload)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_json(path, kind: str) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, line=exc.lineno, offset=exc.pos) from None
    if not isinstance(doc, dict) or doc.get("format") != f"{_MAGIC}-{kind}":
        raise ParseError(f"not a {kind} record", path, line=1)
    if doc.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {doc.get('version')!r}", path, line=1)
    return doc


def write_registration(path, result: RegistrationResult, config: RansacConfig = None):
    write_json(path, "registration", registration_to_dict(result, config))


def read_registration(path) -> dict:
    """The registration record as a dict with ``transform`` rebuilt."""
    doc = read_json(path, "registration")
    try:
        doc["transform"] = transform_from_dict(doc)
    except (KeyError, ValueError, FlowposeError) as exc:
        raise ParseError(f"bad transform: {exc}", path) from None
    return doc


def write_csv(path, kind: str, rows, config=None, seed=None, columns=None):
    """CSV with a versioned header line and ``# key = value`` lines echoing config and seed."""
    rows = list(rows)
    columns = columns or (list(rows[0].keys()) if rows else [])
    buf = _io.StringIO()
    buf.write(_header(kind) + "\n")
    if seed is not None:
        buf.write(f"# seed = {_fmt(seed)}\n")
    if config is not None:
        items = config.items() if isinstance(config, dict) else flatten_config(config).items()
        for k, v in items:
            buf.write(f"# {k} = {'none' if v is None else _fmt(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path, kind: str):
    """Returns ``(rows, echo)``: rows as dicts of strings, echo as the ``# key = value`` pairs."""
    lines = _read_text(path)
    if not lines:
        raise ParseError("empty file", path, line=1)
    _check_header(lines[0], kind, path)
    echo = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        if "=" in lines[i]:
            k, v = (p.strip() for p in lines[i][1:].split("=", 1))
            echo[k] = v
        i += 1
    if i >= len(lines):
        raise ParseError("missing column header", path, line=i + 1)
    reader = csv.reader(lines[i:])
    columns = next(reader)
    rows = []
    for n, rec in enumerate(reader, start=i + 2):
        if len(rec) != len(columns):
            raise ParseError(f"expected {len(columns)} fields, got {len(rec)}", path, line=n)
        rows.append(dict(zip(columns, rec)))
    return rows, echo


def write_training_log(path, log, timing_path=None):
    """``(epoch, loss)`` rows; wall-clock seconds go to ``timing_path`` when given."""
    write_csv(path, "train-log", [{"epoch": e, "loss": loss} for e, loss, _ in log.rows],
              columns=["epoch", "loss"])
    if timing_path is not None:
        write_csv(timing_path, "train-timing", [{"epoch": e, "seconds": s} for e, _, s in log.rows],
                  columns=["epoch", "seconds"])

