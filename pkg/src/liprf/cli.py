"""Command-line pipeline: reconstruct, stylize, render, evaluate, verify.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  All randomness
derives from --seed, so identical invocations produce byte-identical
outputs and logs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fixtures, metrics, pst, scene_io, train, verify
from .render import render_view
from .scene_io import Checkpoint, load_checkpoint, load_scene, save_checkpoint
from .train import TrainConfig, bake_field, interpolate_fields, load_config

logger = logging.getLogger("liprf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="liprf", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count(),
                        help="worker threads (never affects results)")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file overriding training defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="generate a synthetic scene")
    p.add_argument("--preset", required=True, choices=["two_object", "slab", "occluder"])
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("reconstruct", help="stage 1: fit a voxel field")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stylize", help="stage 2: train the Lipschitz network")
    p.add_argument("--ckpt", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--style", help="style image for the built-in linear transfer")
    group.add_argument("--stylized-dir", help="directory of externally stylized views")
    p.add_argument("--per-view", action="store_true",
                   help="fit one transfer per view instead of a global one")
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--poses", default=None,
                   help="scene.json-style file with alternative poses")

    p = sub.add_parser("interpolate", help="blend source and stylized fields")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("metrics", help="warped-consistency report for renders")
    p.add_argument("--scene", required=True)
    p.add_argument("--renders", required=True)
    p.add_argument("--span", choices=["short", "long"], default="short")

    p = sub.add_parser("verify", help="run the numerical certification suites")
    p.add_argument("--suite", default="all",
                   choices=["all", *verify.SUITE_NAMES])
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--seed", type=int, dest="verify_seed", default=None)

    return parser


def _configure_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("LIPRF_LOG", "info").lower(), logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("liprf")
    root.handlers[:] = [handler]
    root.setLevel(level)


def _train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        config = load_config(args.config, config)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _render_outputs(fld, cameras, out_dir, config):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cameras):
        image, depth = render_view(cam, fld, n_samples=config.n_samples,
                                   background=config.background, with_depth=True)
        scene_io.write_image(image, out / f"view_{i:03d}.png")
        np.save(out / f"depth_{i:03d}.npy", depth)
    logger.info("wrote %d views to %s", len(cameras), out_dir)


def _load_poses(path, reference_cam):
    import json

    data = json.loads(Path(path).read_text())
    width = int(data.get("width", reference_cam.width))
    height = int(data.get("height", reference_cam.height))
    focal = float(data.get("focal", reference_cam.focal))
    cx = float(data.get("cx", width / 2.0))
    cy = float(data.get("cy", height / 2.0))
    cams = []
    for frame in data["frames"]:
        pose = np.asarray(frame["transform"], dtype=np.float64).reshape(3, 4)
        cams.append(scene_io.Camera(width=width, height=height, focal=focal,
                                    cx=cx, cy=cy, pose=pose))
    return cams


def _cmd_fixtures(args) -> int:
    scene = fixtures.preset(args.preset)
    fixtures.generate_scene(scene, args.size, args.views, args.seed, args.out)
    logger.info("generated %s scene with %d views at %s", args.preset,
                args.views, args.out)
    return 0


def _cmd_reconstruct(args) -> int:
    config = _train_config(args)
    dataset = load_scene(args.scene)
    fld = train.train_reconstruction(dataset, config)
    ckpt_config = config.to_dict()
    ckpt_config["scene"] = str(Path(args.scene).resolve())
    save_checkpoint(Checkpoint(stage="recon", field=fld, net=None,
                               config=ckpt_config, seed=config.seed), args.out)
    logger.info("saved reconstruction checkpoint to %s", args.out)
    return 0


def _cmd_stylize(args) -> int:
    config = _train_config(args)
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_scene(ckpt.config["scene"])
    if args.stylized_dir:
        sty_dir = Path(args.stylized_dir)
        stylized = []
        for i in range(dataset.n_views):
            stylized.append(scene_io.read_image(sty_dir / f"view_{i:03d}.png"))
        dataset.stylized = stylized
    else:
        style = scene_io.read_image(args.style)
        mode = "per_view" if args.per_view else "global"
        dataset.stylized, _ = pst.stylize_views(dataset, style, mode=mode)
    net = train.train_liprf(ckpt.field, dataset, config)
    ckpt_config = config.to_dict()
    ckpt_config["scene"] = ckpt.config["scene"]
    save_checkpoint(Checkpoint(stage="liprf", field=ckpt.field, net=net,
                               config=ckpt_config, seed=config.seed), args.out)
    logger.info("saved stylization checkpoint to %s", args.out)
    return 0


def _cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = TrainConfig()
    if args.config:
        config = load_config(args.config, config)
    dataset = load_scene(ckpt.config["scene"])
    cameras = dataset.cameras
    if args.poses:
        cameras = _load_poses(args.poses, dataset.cameras[0])
    fld = ckpt.field
    if ckpt.stage == "liprf":
        fld = bake_field(ckpt.field, ckpt.net)
    _render_outputs(fld, cameras, args.out, config)
    return 0


def _cmd_interpolate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stage != "liprf" or ckpt.net is None:
        raise ValueError("interpolation needs a stage-2 checkpoint")
    config = TrainConfig()
    if args.config:
        config = load_config(args.config, config)
    dataset = load_scene(ckpt.config["scene"])
    stylized = bake_field(ckpt.field, ckpt.net)
    blended = interpolate_fields(ckpt.field, stylized, args.alpha)
    _render_outputs(blended, dataset.cameras, args.out, config)
    return 0


def _cmd_metrics(args) -> int:
    dataset = load_scene(args.scene)
    renders = Path(args.renders)
    images, depths = [], []
    for i in range(dataset.n_views):
        img_path = renders / f"view_{i:03d}.png"
        depth_path = renders / f"depth_{i:03d}.npy"
        if not img_path.exists():
            break
        if not depth_path.exists():
            raise FileNotFoundError(f"missing depth map: {depth_path}")
        images.append(scene_io.read_image(img_path))
        depths.append(np.load(depth_path))
    if not images:
        raise FileNotFoundError(f"no rendered views found in {renders}")
    scale = float(np.linalg.norm(dataset.bounds_max - dataset.bounds_min))
    pairs, mean = metrics.consistency_report(images, depths, dataset.cameras[:len(images)],
                                             scene_scale=scale, span=args.span)
    print(f"pair consistency ({args.span} span)")
    for i, j, value in pairs:
        print(f"  {i:3d} -> {j:3d}: {value:7.2f} dB")
    print(f"  mean: {mean:7.2f} dB")
    return 0


def _cmd_verify(args) -> int:
    seed = args.verify_seed if args.verify_seed is not None else args.seed
    reports = verify.run_suites(args.suite, trials=args.trials, seed=seed)
    failed = 0
    for name, report in reports.items():
        status = "pass" if report.passed else "FAIL"
        print(f"{name:7s} {status}  trials={report.trials}  "
              f"violations={report.violations}  max_ratio={report.max_ratio:.6f}")
        failed += report.violations
    return 0 if failed == 0 else 2


_COMMANDS = {
    "fixtures": _cmd_fixtures,
    "reconstruct": _cmd_reconstruct,
    "stylize": _cmd_stylize,
    "render": _cmd_render,
    "interpolate": _cmd_interpolate,
    "metrics": _cmd_metrics,
    "verify": _cmd_verify,
}


def run(argv=None) -> int:
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit code 2
        logger.error("%s", exc)
        if os.environ.get("LIPRF_LOG", "").lower() == "debug":
            raise
        return 2


def main() -> None:
    sys.exit(run())
