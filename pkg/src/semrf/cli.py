"""Command-line entry point: ``semrf {synth,train,render,eval,ablate}``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 non-finite numerics.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema

from . import io
from .dataset import Dataset, DatasetError
from .evaluate import evaluate_run, predict_pair
from .geometry import Camera
from .metrics import SEMANTIC_FIELDS, format_table
from .synthscene import DATASET_SCHEMA, SceneSpecError, dataset_hash, generate_dataset
from .train import ConfigError, NonFiniteError, TrainConfig, load_checkpoint, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": DATASET_SCHEMA,
        "train": {"type": "object"},  # checked field-by-field by TrainConfig.from_json
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"split": {"type": "string"}},
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "out": {"type": "string"},
        "data": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

ABLATIONS = (
    ("final", {}),
    ("w/o photometric loss", {"photometric_loss": False}),
    ("w/o semantic loss", {"semantic_loss": False}),
    ("w/o source view loss", {"source_view_loss": False}),
    ("w/o viewing dir", {"use_viewdir": False}),
)


def _slug(name: str) -> str:
    return name.replace("w/o ", "no_").replace(" ", "_")


def load_run_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"{p}: invalid field {where}: {exc.message}") from None
    TrainConfig.from_json(cfg.get("train", {}))
    return cfg


def _seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _threads(args, cfg: dict) -> int:
    return args.threads if args.threads is not None else int(cfg.get("threads", 1))


def _train_config(args, cfg: dict) -> TrainConfig:
    tc = TrainConfig.from_json({**cfg.get("train", {}), "seed": _seed(args, cfg)})
    over = {}
    if getattr(args, "no_photometric", False):
        over["photometric_loss"] = False
    if getattr(args, "no_semantic", False):
        over["semantic_loss"] = False
    if getattr(args, "no_source_loss", False):
        over["source_view_loss"] = False
    if getattr(args, "no_viewdir", False):
        over["use_viewdir"] = False
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    try:
        return replace(tc, **over)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _data_dir(args, cfg: dict) -> Path:
    d = args.data or cfg.get("data")
    if d is None:
        raise ConfigError("no dataset directory: pass --data or set \"data\" in the config")
    return Path(d)


def _out_dir(args, cfg: dict, default: str) -> Path:
    return Path(args.out or cfg.get("out") or default)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    dcfg = dict(cfg.get("dataset", {}))
    if args.noise_deg is not None:
        dcfg["noise_deg"] = args.noise_deg
    out = _out_dir(args, cfg, "dataset")
    manifest = generate_dataset(dcfg, out, _seed(args, cfg))
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    tc = _train_config(args, cfg)
    ds = Dataset.load(_data_dir(args, cfg))
    out = _out_dir(args, cfg, "run")
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train_loop(ds, tc, out, threads=_threads(args, cfg), resume=resume, log=_log if args.verbose else None)
    io.write_json(out / "config.json", res.checkpoint.config)
    print(f"checkpoint {res.checkpoint_path}")
    print(f"trace {res.trace_path}")
    return EXIT_OK


def _pick_pair(ds: Dataset, scene: str | None, index: int):
    scenes = [scene] if scene else [s for s in ds.pairs if ds.pairs[s]]
    if not scenes or scenes[0] not in ds.pairs:
        raise DatasetError(f"scene {scene!r} not in dataset {ds.root}")
    plist = ds.pairs[scenes[0]]
    if not 0 <= index < len(plist):
        raise DatasetError(f"pair index {index} out of range for scene {scenes[0]} ({len(plist)} pairs)")
    return plist[index]


def cmd_render(args) -> int:
    cfg = load_run_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    tc = TrainConfig.from_json(ckpt.config["train"])
    ds = Dataset.load(_data_dir(args, cfg))
    pair = _pick_pair(ds, args.scene, args.pair)
    cam_path = Path(args.cameras)
    if not cam_path.is_file():
        raise FileNotFoundError(f"cameras file not found: {cam_path}")
    try:
        cams = [Camera.from_json(c) for c in io.read_json(cam_path)]
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{cam_path}: {exc}") from None
    out = _out_dir(args, cfg, "render")
    out.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(cams):
        view = predict_pair(ckpt.params, tc, ds, pair, camera=cam, threads=_threads(args, cfg))
        io.write_label_png(out / f"view_{k}.labels.png", view.labels, ds.registry.palette)
        io.write_rgb_png(out / f"view_{k}.png", view.rgb)
        io.write_pfm(out / f"view_{k}.pfm", view.depth)
        print(out / f"view_{k}.labels.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    ds = Dataset.load(_data_dir(args, cfg))
    split = args.split or cfg.get("eval", {}).get("split", "val")
    ds.split(split)  # fail early, naming the manifest path
    ckpt = None if args.oracle else load_checkpoint(args.checkpoint) if args.checkpoint else None
    if ckpt is None and not args.oracle:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    out = _out_dir(args, cfg, "eval")
    res = evaluate_run(ckpt, ds, split, out_dir=out, threads=_threads(args, cfg), oracle=args.oracle)
    io.write_json(out / "metrics.json", res.report)
    print(format_table([("oracle" if args.oracle else "model", res.report)]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    base = _train_config(args, cfg)
    data = _data_dir(args, cfg)
    ds = Dataset.load(data)
    split = args.split or cfg.get("eval", {}).get("split", "val")
    ds.split(split)
    out = _out_dir(args, cfg, "ablation")
    out.mkdir(parents=True, exist_ok=True)
    digest = dataset_hash(data)
    threads = _threads(args, cfg)
    rows, records = [], []
    for name, over in ABLATIONS:
        run_dir = out / _slug(name)
        rec = {"name": name, "dataset_hash": digest, "overrides": over}
        try:
            tc = replace(base, **over)
            res = train_loop(ds, tc, run_dir, threads=threads, log=_log if args.verbose else None)
            ev = evaluate_run(res.checkpoint, ds, split, out_dir=run_dir / "eval", threads=threads)
            report = dict(ev.report)
            if not tc.semantic_loss:
                for k in SEMANTIC_FIELDS:
                    report[k] = None
                report["per_class_IoU"] = None
            io.write_json(run_dir / "metrics.json", report)
            rec.update(status="ok", metrics=report)
            rows.append((name, report))
        except Exception as exc:  # sweep continues; failure is recorded
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append((name + " [FAILED]", {}))
        records.append(rec)
    by = {r["name"]: r for r in records}
    trend = None
    if by["final"].get("status") == "ok" and by["w/o semantic loss"].get("status") == "ok":
        a = by["w/o semantic loss"]["metrics"]["Rel"]
        b = by["final"]["metrics"]["Rel"]
        trend = {"rel_without_semantic": a, "rel_final": b, "without_semantic_not_better": bool(a >= b)}
    table = f"dataset sha256 {digest}\nsplit {split}\n" + format_table(rows, hide_semantic={"w/o semantic loss"})
    io.write_json(out / "ablation.json", {"dataset_hash": digest, "split": split, "runs": records, "trend": trend})
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    if trend is not None:
        print(
            f"depth Rel: w/o semantic loss {trend['rel_without_semantic']:.4f} vs final {trend['rel_final']:.4f}"
            f" (w/o semantic >= final: {trend['without_semantic_not_better']}; informational)"
        )
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads for ray chunks")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    toggles = argparse.ArgumentParser(add_help=False)
    toggles.add_argument("--no-photometric", action="store_true", help="drop the photometric loss terms")
    toggles.add_argument("--no-semantic", action="store_true", help="drop the semantic loss terms")
    toggles.add_argument("--no-source-loss", action="store_true", help="drop the source-view loss terms")
    toggles.add_argument("--no-viewdir", action="store_true", help="feed a zero viewing direction")
    toggles.add_argument("--steps", type=int, help="override the number of training steps")

    p = argparse.ArgumentParser(prog="semrf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--noise-deg", type=float, help="max per-axis rotation noise for source cameras")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common, toggles], help="train on a dataset")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render novel cameras from a pair's sources")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cameras", required=True, help="JSON list of cameras to render")
    r.add_argument("--data", help="dataset directory holding the source views")
    r.add_argument("--scene", help="scene id whose pair provides the sources")
    r.add_argument("--pair", type=int, default=0, help="pair index within the scene")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--split", help="split name (default from config, else val)")
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common, toggles], help="train+eval the five loss/input ablations")
    a.add_argument("--data", help="dataset directory")
    a.add_argument("--split", help="split to evaluate")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SceneSpecError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
