"""Command line entry point: ``flowpose gen | train | estimate | eval | ablate``.

Exit status is 0 on success, 1 on invalid input (bad flags, missing,
malformed or inconsistent files) and 2 when a run fails (degenerate geometry, divergence,
I/O trouble). Result files are deterministic given ``--seed``; wall-clock
timings go to ``*.timing.*`` sidecar files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .errors import FlowposeError, ParseError, ValidationError
from .flow import TrainConfig
from .pipeline import (
    FEATURE_MODES,
    IR_GRID,
    PipelineConfig,
    estimate_pose,
    evaluate_condition,
    eval_metrics,
    relative_gain,
    run_ablation_solvers,
    run_steps_sweep,
    train_model,
)
from .scenes import generate_scenes

log = logging.getLogger("flowpose")

TIMING_COLUMNS = ("mean_seconds", "mean_denoise_seconds")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _pipeline_config(args) -> PipelineConfig:
    cfg = io.read_config(args.config, PipelineConfig, "pipeline") if args.config else PipelineConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "feature_mode", None):
        changes["feature_mode"] = args.feature_mode
    return replace(cfg, **changes)


def _scene_files(directory):
    files = sorted(p for p in Path(directory).glob("*.txt") if not p.name.startswith("spec"))
    if not files:
        raise ValidationError(f"no scene files in {directory}")
    return files


def _load_scenes(directory):
    return [io.load_scene(p) for p in _scene_files(directory)]


def _load_model(spec: str):
    return "oracle" if spec == "oracle" else io.load_model(spec)


def _timing_path(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + ".timing" + suffix)


# -- subcommands ------------------------------------------------------------

def cmd_gen(args):
    base = io.read_scene_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_scenes(base, args.count, args.seed)
    io.write_scene_spec(out / "spec.txt", base)
    for i, rec in enumerate(records):
        io.save_scene(out / f"scene_{i:04d}.txt", rec)
    log.info("wrote %d scenes to %s", len(records), out)


def cmd_train(args):
    cfg = _pipeline_config(args)
    tcfg = io.read_config(args.train_config, TrainConfig, "train") if args.train_config else TrainConfig()
    tcfg = replace(tcfg, epochs=args.epochs, seed=args.seed)
    records = _load_scenes(args.data)
    model, train_log = train_model(records, tcfg, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_model(out, model)
    io.write_training_log(out.with_name(out.stem + ".log.csv"), train_log, _timing_path(out, ".csv"))
    io.write_config(out.with_name(out.stem + ".train.txt"), tcfg, "train")
    io.write_config(out.with_name(out.stem + ".pipeline.txt"), cfg, "pipeline")
    log.info("trained on %d scenes, final loss %.5f", len(records), train_log.losses[-1])


def cmd_estimate(args):
    cfg = _pipeline_config(args)
    record = io.load_scene(args.scene)
    model = _load_model(args.model)
    pose, reg, diag = estimate_pose(record, cfg, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "scene": Path(args.scene).name,
        "model": args.model if args.model == "oracle" else Path(args.model).name,
        "seed": cfg.seed,
        "pose": io.transform_to_dict(pose),
        "registration": io.registration_to_dict(reg),
        "inlier_ratio": {f"{tau:g}": v for tau, v in diag["inlier_ratio"].items()},
        "icp_iterations": diag["icp_iterations"],
        "icp_warning": diag["icp_warning"],
        "config": io.flatten_config(cfg),
    }
    io.write_json(out, "estimate", payload)
    io.write_json(_timing_path(out, ".json"), "timing", {"seconds": diag["seconds"]})


def cmd_eval(args):
    preds = sorted(p for p in Path(args.pred).glob("*.json") if not p.name.endswith(".timing.json"))
    if not preds:
        raise ValidationError(f"no prediction files in {args.pred}")
    rows = []
    for p in preds:
        doc = io.read_json(p, "estimate")
        try:
            pose = io.transform_from_dict(doc["pose"])
            scene_name = doc["scene"]
        except (KeyError, TypeError, FlowposeError) as exc:
            raise ParseError(f"bad estimate record: {exc}", p) from None
        rec = io.load_scene(Path(args.gt) / scene_name)
        m = eval_metrics(pose, rec.gt, rec.query)
        rows.append({"scene": scene_name, "rotation_deg": m.rotation_deg, "translation": m.translation,
                     "add": m.add, "adds": m.adds, "success": m.success(rec.diameter)})
    rows.append({
        "scene": "mean",
        **{k: float(np.mean([r[k] for r in rows])) for k in ("rotation_deg", "translation", "add", "adds")},
        "success": float(np.mean([r["success"] for r in rows])),
    })
    io.write_csv(args.out, "eval", rows, config={"pred": Path(args.pred).name, "gt": Path(args.gt).name})


def _split_timing(rows, out: Path, kind: str, config, seed):
    timing = [{k: r[k] for k in ("steps",) + TIMING_COLUMNS if k in r} for r in rows]
    clean = [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]
    if any(len(t) > 1 for t in timing):
        io.write_csv(_timing_path(out, ".csv"), kind + "-timing", timing)
    io.write_csv(out, kind, clean, config=config, seed=seed)


def cmd_ablate(args):
    cfg = _pipeline_config(args)
    records = _load_scenes(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo = {**io.flatten_config(cfg), "model": Path(args.model).name, "suite": args.suite,
            "contamination": args.contamination, "steps_list": args.steps_list}
    if args.suite == "solvers":
        if len(records) < 30:
            raise ValidationError("the solver ablation needs at least 30 scenes")
        rows = run_ablation_solvers(records, _load_model(args.model), cfg, args.contamination)
    elif args.suite == "steps":
        try:
            steps = [int(s) for s in args.steps_list.split(",") if s.strip()]
        except ValueError:
            raise ValidationError(f"bad --steps-list {args.steps_list!r}") from None
        if not steps or min(steps) < 1:
            raise ValidationError("--steps-list needs positive integers")
        rows = run_steps_sweep(records, _load_model(args.model), steps, cfg)
    else:
        model_dir = Path(args.model)
        results = {}
        for mode in FEATURE_MODES:
            ckpt = model_dir / f"{mode}.ckpt"
            if not ckpt.exists():
                raise ValidationError(f"features suite expects {ckpt}")
            results[mode] = evaluate_condition(records, io.load_model(ckpt), replace(cfg, feature_mode=mode))
        rows = []
        for mode, res in results.items():
            row = {"feature_mode": mode, "scenes": len(records),
                   **{k: v for k, v in res.items() if not isinstance(v, (list, dict))}}
            for tau in IR_GRID:
                row[f"ir_{tau:g}"] = res["inlier_ratio"][tau]
                row[f"ir_gain_{tau:g}"] = relative_gain(res["inlier_ratio"][tau],
                                                        results["overlap"]["inlier_ratio"][tau])
            rows.append(row)
    _split_timing(rows, out, f"ablate-{args.suite}", echo, cfg.seed)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowpose", description="Flow-matching object pose estimation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes from a spec file")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a velocity model on a scene directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--config", help="pipeline key-value config")
    t.add_argument("--train-config", help="training key-value config")
    t.add_argument("--feature-mode", choices=FEATURE_MODES)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="estimate the pose of one scene")
    e.add_argument("--model", required=True, help="checkpoint path or 'oracle'")
    e.add_argument("--scene", required=True)
    e.add_argument("--steps", type=int, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", help="pipeline key-value config")
    e.add_argument("--feature-mode", choices=FEATURE_MODES)
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("eval", help="score estimates against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", required=True, choices=("solvers", "steps", "features"))
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True,
                   help="checkpoint or 'oracle'; for the features suite a directory of <mode>.ckpt files")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--config", help="pipeline key-value config")
    a.add_argument("--contamination", type=float, default=0.0,
                   help="fraction of denoised points replaced by outliers (solvers suite)")
    a.add_argument("--steps-list", default="1,10,50", help="comma-separated step counts (steps suite)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ParseError, FileNotFoundError) as exc:
        print(f"flowpose: invalid input: {exc}", file=sys.stderr)
        return 1
    except (FlowposeError, OSError) as exc:
        print(f"flowpose: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
