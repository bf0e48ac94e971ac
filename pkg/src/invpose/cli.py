"""Command-line entry point: render, localize, bench and stats.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
Set INVPOSE_LOG to a logging level name (DEBUG, INFO, ...) for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lie
from .field import AnalyticField, SceneError, SceneSpec
from .harness import (
    default_camera,
    generate_orbit_frames,
    load_plan,
    read_results,
    resolve_scene,
    run_plan,
    summarize,
    write_results,
    write_summary,
)
from .lie import Pose
from .objective import RgbdFrame, load_frames, save_frames
from .optimizer import NumericalAbort, OptimizerConfig, run
from .render import Camera, render_image

logger = logging.getLogger("invpose")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


class ConfigError(Exception):
    pass


def _read_json(path: str, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{what} {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _scene(name: str) -> SceneSpec:
    try:
        return resolve_scene(name)
    except FileNotFoundError as exc:
        raise ConfigError(f"scene {name}: not a built-in scene or readable file") from exc


def _camera(args) -> Camera:
    base = default_camera()
    return Camera.from_fov(args.width or base.width, args.height or base.height, args.fov, args.near, args.far)


def cmd_render(args) -> int:
    scene = _scene(args.scene)
    camera = _camera(args)
    out = Path(args.out)
    if args.pose:
        pose = Pose.from_dict(_read_json(args.pose, "pose"))
        color, depth, opacity = render_image(AnalyticField(scene), camera, pose, args.samples)
        valid = opacity >= 0.5
        frames = [RgbdFrame(color, depth, valid, camera, Pose.identity(), pose)]
    else:
        frames = generate_orbit_frames(scene, args.radius, args.frames, args.step, camera, args.azimuth, args.samples)
    save_frames(frames, out)
    (out / "pose.json").write_text(json.dumps(frames[-1].pose.to_dict(), indent=2) + "\n")
    print(f"wrote {len(frames)} frame(s) to {out}")
    return EXIT_OK


def _optimizer_config(path: str | None) -> OptimizerConfig:
    if not path:
        return OptimizerConfig()
    return OptimizerConfig.from_dict(_read_json(path, "optimizer config"))


def cmd_localize(args) -> int:
    scene = _scene(args.scene)
    try:
        frames, all_depth = load_frames(args.frames)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    config = _optimizer_config(args.config)
    if not all_depth and config.lambda_depth > 0:
        logger.warning("depth images missing; running RGB-only")
        config = replace(config, lambda_depth=0.0)
    truth = frames[-1].pose
    if args.init:
        init = Pose.from_dict(_read_json(args.init, "initial pose"))
    elif args.perturb:
        if truth is None:
            raise ConfigError("--perturb needs the ground-truth pose in the last frame's sidecar")
        trans_len, rot_len = args.perturb
        init = lie.perturb(truth, lie.sample_perturbation(trans_len, rot_len, args.seed))
    elif truth is not None:
        init = truth
    else:
        raise ConfigError("give --init or a frame sidecar with a pose")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    code = EXIT_OK
    try:
        result = run(AnalyticField(scene), frames, init, truth, config, args.seed)
    except NumericalAbort as exc:
        logger.error("%s", exc)
        result = exc.result
        code = EXIT_ABORT
    result.write_trace(out / "trace.csv")
    summary = {
        "converged": result.converged,
        "convergence_step": result.convergence_step,
        "n_steps": result.n_steps,
        "stop_reason": result.stop_reason,
        "initial_pose": init.to_dict(),
        "final_pose": result.final_pose.to_dict() if result.final_pose is not None else None,
        "config": config.to_dict(),
        "seed": args.seed,
    }
    if truth is not None and result.n_steps:
        summary["final_trans_err_m"] = result.trans_err[-1]
        summary["final_rot_err_rad"] = result.rot_err[-1]
    (out / "result.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"converged={result.converged} step={result.convergence_step} steps={result.n_steps} -> {out}")
    return code


def cmd_bench(args) -> int:
    try:
        plan = load_plan(args.plan)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"plan {args.plan}: {exc}") from exc
    if args.seed is not None:
        plan.master_seed = args.seed
    for name in plan.scenes:
        _scene(name)
    results = run_plan(plan, jobs=args.jobs or os.cpu_count() or 1)
    write_results(results, args.out)
    (Path(args.out) / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    _print_summary(results)
    records = [r for _, recs in results for r in recs]
    if records and all(r.result.error for r in records):
        logger.error("every trial aborted")
        return EXIT_ABORT
    return EXIT_OK


def cmd_stats(args) -> int:
    try:
        results = read_results(args.results)
    except OSError as exc:
        raise ConfigError(f"results {args.results}: {exc.strerror}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"results {args.results}: malformed ({exc})") from exc
    write_summary(results, args.out)
    _print_summary(results)
    return EXIT_OK


def _print_summary(results) -> None:
    for row in summarize(results):
        mag = "all" if row.magnitude is None else f"{row.magnitude:g} m"
        median = "-" if row.steps_quartiles is None else f"{row.steps_quartiles[2]:g}"
        print(f"{row.variant:>12} {mag:>8}  {row.n_converged}/{row.n_trials} converged "
              f"({row.convergence_pct:.2f}%)  median steps {median}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invpose", description="RGB-D pose estimation by inverse volume rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render RGB-D frames of a scene")
    p.add_argument("--scene", required=True, help="built-in scene name or scene JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--pose", help="camera pose JSON; default is an orbit view")
    p.add_argument("--frames", type=int, default=1, help="orbit frames, ending at --azimuth")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--step", type=float, default=15.0, help="orbit step in degrees")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")
    p.add_argument("--near", type=float, default=2.0)
    p.add_argument("--far", type=float, default=6.0)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; rendering is deterministic")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("localize", help="estimate the pose of the last frame in a directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", required=True, help="directory written by 'render'")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="optimizer settings JSON")
    p.add_argument("--init", help="initial pose JSON")
    p.add_argument("--perturb", type=float, nargs=2, metavar=("TRANS_M", "ROT_RAD"),
                   help="start from the ground truth perturbed by these lengths")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("bench", help="run a benchmark plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    p.add_argument("--seed", type=int, help="override the plan's master seed")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="recompute summary.csv and stats.json from results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("INVPOSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SceneError) as exc:
        print(f"invpose: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invpose: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
