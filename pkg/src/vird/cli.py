"""``vird`` command line: generate, train, eval, infer, visualize."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ABLATIONS, ConfigError, resolve_config
from .geometry import largest_divisor_at_most
from .synthdata import (DatasetError, SynthParams, generate_dataset, params_from_manifest, read_dataset,
                        write_dataset)
from .synthdata.scene import SceneError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

class UsageError(Exception):
    """Bad flags or inputs; reported with exit code 2."""


def default_seed(value):
    if value is not None:
        return value
    env = os.environ.get("VIRD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"VIRD_SEED={env!r} is not an integer") from None


def parse_grid(text: str) -> int:
    parts = text.lower().split("x")
    try:
        sizes = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--grid expects GxG, got {text!r}") from None
    if len(sizes) != 2 or sizes[0] != sizes[1]:
        raise UsageError(f"--grid expects a square GxG grid, got {text!r}")
    if sizes[0] < 1:
        raise UsageError("--grid must contain at least one position")
    return sizes[0]


def load_params(spec: str | None) -> SynthParams:
    """``--params`` is a JSON file path or an inline JSON object of overrides."""
    if not spec:
        return SynthParams()
    try:
        text = Path(spec).read_text() if Path(spec).is_file() else spec
        data = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --params: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("--params must be a JSON object")
    known = {f.name for f in fields(SynthParams)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown scene parameter(s): {', '.join(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return replace(SynthParams(), **data)
    except (TypeError, ValueError, SceneError) as exc:
        raise UsageError(f"invalid scene parameters: {exc}") from exc


def load_data(path):
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    seed = default_seed(args.seed)
    params = load_params(args.params)
    try:
        pairs = generate_dataset(seed, args.count, params, jobs=args.jobs)
    except SceneError as exc:
        raise UsageError(f"scene parameters are infeasible: {exc}") from exc
    write_dataset(pairs, args.out, seed=seed, params=params)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def _ablations(values) -> list[str]:
    names = [n.strip() for v in values or () for n in v.split(",") if n.strip()]
    for n in names:
        if n not in ABLATIONS:
            raise UsageError(f"unknown ablation {n!r}; choose from {', '.join(sorted(ABLATIONS))}")
    return names


def _resolved(args):
    overrides = list(args.set or ())
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "seed", None) is not None or "VIRD_SEED" in os.environ:
        overrides.append(f"train.seed={default_seed(args.seed)}")
    try:
        return resolve_config(args.config, overrides, _ablations(getattr(args, "ablate", None)))
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    from .experiment.train import train

    cfg = _resolved(args)
    pairs, manifest = load_data(args.data)
    data = params_from_manifest(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.json")
    train(cfg, pairs, data, out)
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _load_model(args):
    from .experiment.checkpoint import CheckpointError, load_checkpoint, read_checkpoint_manifest

    try:
        manifest = read_checkpoint_manifest(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    cfg = None
    if getattr(args, "set", None) or getattr(args, "config", None):
        try:
            cfg = resolve_config(args.config, args.set or (), base=manifest["config"])
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    try:
        return load_checkpoint(args.checkpoint, cfg)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _grid_args(args, model, stream=None):
    G = parse_grid(args.grid) if args.grid else model.cfg.train.test_grid
    requested = args.ntheta if args.ntheta is not None else model.cfg.train.test_ntheta
    if requested < 1:
        raise UsageError("--ntheta must be positive")
    snapped = largest_divisor_at_most(model.W_s, requested)
    if snapped != requested:
        print(f"ntheta: requested {requested}, using {snapped} (divisor of W_s={model.W_s})", file=stream)
    else:
        print(f"ntheta: {snapped}", file=stream)
    return G, requested


def cmd_eval(args) -> int:
    from .experiment.evaluate import evaluate, write_report

    model = _load_model(args)
    pairs, _ = load_data(args.data)
    G, n_theta = _grid_args(args, model)
    regression = False if args.no_regression else None
    report = evaluate(model, pairs, G, n_theta, use_regression=regression, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.cfg.save(out / "resolved_config.json")
    write_report(report, out)
    m = report.metrics
    print(f"median position error {m.get('pos_median_m', float('nan')):.3f} m, "
          f"median orientation error {m.get('orient_median_deg', float('nan')):.3f} deg "
          f"over {len(report.samples)} samples")
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def cmd_infer(args) -> int:
    from .experiment.evaluate import eval_grid, localize
    from .experiment.visualize import pose_overlay

    sat = _read_image(args.sat)
    grd = _read_image(args.grd)
    if sat.shape[0] != sat.shape[1]:
        raise UsageError(f"satellite image must be square, got {sat.shape[1]}x{sat.shape[0]}")
    model = _load_model(args)
    d = model.data
    if sat.shape[0] != d.sat_px:
        raise UsageError(f"satellite image is {sat.shape[0]} px, the model expects {d.sat_px}")
    if grd.shape[:2] != (d.pano_h, d.pano_w):
        raise UsageError(f"ground image is {grd.shape[1]}x{grd.shape[0]}, the model expects {d.pano_w}x{d.pano_h}")
    if not math.isclose(args.res, d.resolution, rel_tol=1e-9):
        raise UsageError(f"--res {args.res} differs from the model's {d.resolution} m/px")
    G, n_theta = _grid_args(args, model, stream=sys.stderr)
    grid = eval_grid(model, G, n_theta)
    _, pose, score = localize(model, sat, grd, grid, model.cfg.train.use_regression, args.jobs)
    print(f"x_m={pose.x:.6f} y_m={pose.y:.6f} theta_deg={math.degrees(pose.theta):.6f} score={score:.6f}")
    out = Path(args.out) if args.out else Path(args.sat).with_name(Path(args.sat).stem + "_pose.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    pose_overlay(sat, model.sat_frame, None, pose, out)
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .experiment.visualize import emit_visualizations

    model = _load_model(args)
    pairs, _ = load_data(args.data)
    if args.ids:
        wanted = set(args.ids.split(","))
        missing = wanted - {p.id for p in pairs}
        if missing:
            raise UsageError(f"unknown sample id(s): {', '.join(sorted(missing))}")
        pairs = [p for p in pairs if p.id in wanted]
    else:
        pairs = pairs[:args.limit]
    G, n_theta = _grid_args(args, model)
    rows = [int(r) for r in args.rows.split(",")] if args.rows else None
    count = 0
    for p in pairs:
        try:
            count += len(emit_visualizations(model, p, args.out, rows, G, n_theta))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    print(f"wrote {count} images to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vird", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path config override")

    def grid(p):
        p.add_argument("--grid", help="search positions as GxG")
        p.add_argument("--ntheta", type=int, help="orientation candidates (snapped to a divisor of W_s)")

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="scene parameters: JSON file or inline JSON object")
    common(p, config=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append", help=f"one of {', '.join(sorted(ABLATIONS))}")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-regression", action="store_true", help="report coarse grid poses only")
    grid(p)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="localize one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sat", required=True)
    p.add_argument("--grd", required=True)
    p.add_argument("--res", type=float, required=True, help="satellite resolution in m/px")
    p.add_argument("--out", help="overlay PNG path")
    grid(p)
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize", help="write attention, reconstruction and pose images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", help="comma-separated sample ids")
    p.add_argument("--limit", type=int, default=4, help="samples to draw when --ids is absent")
    p.add_argument("--rows", help="comma-separated shared-axis rows")
    grid(p)
    common(p)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(max(1, min(args.jobs, torch.get_num_threads())))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
