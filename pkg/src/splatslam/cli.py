"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 dataset error,
4 runtime failure during processing.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .datasets import DatasetEmptyError, DatasetFormatError, Trajectory, write_tum_rgbd
from .gaussian_map import GaussianMap
from .geometry import CameraPose
from .renderer import render, save_debug_images
from .slam import SlamError, evaluate, open_dataset, parse_camera, run_slam, write_metrics
from .synthetic import generate_synthetic, intrinsics_for

EXIT_OK, EXIT_CONFIG, EXIT_DATASET, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("splatslam")


class _DatasetProblem(Exception):
    pass


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    ds = cfg.dataset
    changes = {}
    if getattr(args, "dataset", None):
        if args.dataset == "synthetic":
            changes["kind"] = "synthetic"
        else:
            changes.update(kind="tum", path=str(args.dataset))
    if getattr(args, "max_frames", None) is not None:
        changes["max_frames"] = args.max_frames
    if getattr(args, "downscale", None) is not None:
        changes["downscale"] = args.downscale
    try:
        if changes:
            cfg = cfg.replace(dataset=dataclasses.replace(ds, **changes))
        if getattr(args, "seed", None) is not None:
            cfg = cfg.replace(seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _open(cfg):
    try:
        return open_dataset(cfg)
    except (DatasetFormatError, DatasetEmptyError, FileNotFoundError, OSError) as exc:
        raise _DatasetProblem(str(exc)) from exc


def _print_metrics(metrics):
    for k, v in metrics.items():
        print(f"{k:>20s}  {v:.4f}" if isinstance(v, float) else f"{k:>20s}  {v}")


def cmd_run(args):
    cfg = _config(args)
    if args.output:
        cfg = cfg.replace(output=str(args.output))
    source = _open(cfg)
    result = run_slam(cfg, source)
    metrics = evaluate(result.gmap, result.trajectory, source, cfg.render)
    metrics["seconds"] = result.seconds
    if cfg.output:
        write_metrics(Path(cfg.output) / "metrics.txt", metrics)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_synth(args):
    cfg = _config(args)
    traj_spec = cfg.synthetic.trajectory
    if args.max_frames is not None:
        traj_spec = dataclasses.replace(traj_spec, n_frames=args.max_frames)
    seq = generate_synthetic(cfg.synthetic.scene, traj_spec, cfg.seed)
    out = Path(args.output)
    frames = [f.downscaled(cfg.dataset.downscale) for f in seq.frames]
    write_tum_rgbd(out, frames, seq.trajectory)
    seq.gt_map.save(out / "gt_map.gsmp")
    K = seq.K.scaled(cfg.dataset.downscale) if cfg.dataset.downscale > 1 else seq.K
    (out / "camera.txt").write_text(f"{K.fx},{K.fy},{K.cx},{K.cy},{K.width},{K.height}\n")
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def _run_config(run_dir, args):
    """Config saved by ``run``, with command-line overrides applied."""
    if args.config is None and (run_dir / "config.yaml").is_file():
        args.config = str(run_dir / "config.yaml")
    return _config(args)


def cmd_eval(args):
    run_dir = Path(args.output)
    cfg = _run_config(run_dir, args)
    for name in ("map.gsmp", "trajectory.txt"):
        if not (run_dir / name).is_file():
            raise _DatasetProblem(f"{run_dir}: missing {name}")
    gmap = GaussianMap.load(run_dir / "map.gsmp")
    traj = Trajectory.load_tum(run_dir / "trajectory.txt")
    source = _open(cfg)
    metrics = evaluate(gmap, traj, source, cfg.render)
    write_metrics(run_dir / "metrics.txt", metrics)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_render(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    gmap = GaussianMap.load(args.map)
    if cfg.dataset.kind == "synthetic":
        K = intrinsics_for(cfg.synthetic.scene)
    else:
        K = parse_camera(cfg.dataset.camera)
    factor = args.downscale or cfg.dataset.downscale
    if factor > 1:
        K = K.scaled(factor)
    poses = Trajectory.load_tum(args.poses).poses if args.poses else [CameraPose.identity()]
    shift = np.array([float(v) for v in args.shift.split(",")]) if args.shift else np.zeros(3)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(poses):
        # shift is applied in the camera frame
        pose = CameraPose(p.t + p.rotation @ shift, p.q)
        save_debug_images(render(gmap, pose, K, cfg.render), out / f"view_{i:05d}")
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def cmd_print_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(cfg.dump())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="splatslam", description="Gaussian-splatting RGB-D SLAM on CPU.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output_help):
        sp.add_argument("--config", help="YAML file overriding the defaults")
        sp.add_argument("--dataset", help="TUM-layout directory, or 'synthetic'")
        sp.add_argument("--output", help=output_help)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-frames", type=int)
        sp.add_argument("--downscale", type=int, help="integer resolution divisor")

    sp = sub.add_parser("run", help="run SLAM on a dataset")
    common(sp, "directory for trajectory, map, metrics and logs")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("synth", help="write a synthetic dataset in TUM layout")
    common(sp, "destination directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval", help="metrics for a finished run directory")
    common(sp, "run directory holding map.gsmp and trajectory.txt")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="render views from a map checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--map", required=True, help="map checkpoint (.gsmp)")
    sp.add_argument("--poses", help="TUM trajectory file; identity pose when omitted")
    sp.add_argument("--shift", help="camera-frame offset 'dx,dy,dz' in meters for novel views")
    sp.add_argument("--output", required=True)
    sp.add_argument("--downscale", type=int)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("print-config", help="print the effective configuration as YAML")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_print_config)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("synth", "eval") and not args.output:
        print(f"error: {args.command} requires --output", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (_DatasetProblem, DatasetFormatError, DatasetEmptyError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except SlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET if isinstance(exc.cause, OSError) else EXIT_RUNTIME
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
