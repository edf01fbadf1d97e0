"""Command line entry point: run, simulate, evaluate, selftest."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import MODES, ConfigError, PipelineConfig, load_config, save_config
from .dataio import FormatError, load_trajectory
from .evaluate import AssociationError, evaluate, write_report, write_xy_csv
from .pipeline import EXIT_BAD_INPUT, EXIT_OK, InputError, run, threads_from_env

log = logging.getLogger("se2lio")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="se2lio", description="Planar-constrained LiDAR-inertial odometry.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run odometry on a dataset directory")
    r.add_argument("--config", type=Path, help="TOML configuration")
    r.add_argument("--input", type=Path, help="dataset directory (overrides the config)")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--output", type=Path)
    r.add_argument("--seed", type=int)
    r.add_argument("--frames", type=int, help="stop after this many frames")
    r.add_argument("--force-mode", action="store_true", help="keep an IMU mode even with a slow IMU")

    s = sub.add_parser("simulate", help="write a synthetic box-room dataset")
    s.add_argument("--output", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--columns", type=int, default=1800, help="LiDAR azimuth samples per sweep")
    s.add_argument("--sigma-z", type=float, default=0.0, help="height perturbation std (m)")
    s.add_argument("--cov-theta", type=float, default=0.0, help="roll/pitch perturbation variance (rad^2)")
    s.add_argument("--imu-noise", action="store_true", help="add white noise with the default densities")
    s.add_argument("--range-noise", type=float, default=0.0, help="LiDAR range noise std (m)")

    e = sub.add_parser("evaluate", help="ATE/ARE of a trajectory against ground truth")
    e.add_argument("estimate", type=Path)
    e.add_argument("groundtruth", type=Path)
    e.add_argument("--output", type=Path)
    e.add_argument("--align", action="store_true", help="rigidly align before scoring")
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--name", default="estimate")

    t = sub.add_parser("selftest", help="numerical self-checks")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--instances", type=int, default=100)
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.input is not None:
        changes["input"] = str(args.input)
    if args.output is not None:
        changes["output"] = str(args.output)
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.force_mode:
        changes["force_mode"] = True
    changes["threads"] = threads_from_env(cfg.threads)
    cfg = dataclasses.replace(cfg, **changes)
    if cfg.input is None:
        raise InputError("no dataset: pass --input or set input in the config")
    result = run(cfg, args.frames)
    if cfg.output is not None:
        gt_file = Path(cfg.input) / "groundtruth.txt"
        if gt_file.exists():
            report = evaluate(result.trajectory, load_trajectory(gt_file))
            write_report(cfg.output, report, result.mode)
            print(report.table(result.mode), end="")
    walls = [f.wall_ms for f in result.frames]
    print(f"mode={result.mode} frames={len(result.frames)} "
          f"median_ms={np.median(walls) if walls else 0.0:.1f} "
          f"nonconverged={result.nonconverged_fraction:.3f}")
    return result.exit_code


def _cmd_simulate(args) -> int:
    from .imu import ImuNoiseParams
    from .sim import LidarSpec, SimulationSpec, TrajectorySpec, simulate, write_dataset

    noise = ImuNoiseParams() if args.imu_noise else ImuNoiseParams(0.0, 0.0, 0.0, 0.0)
    spec = SimulationSpec(
        frames=args.frames,
        trajectory=TrajectorySpec(sigma_z=args.sigma_z, cov_theta=args.cov_theta),
        lidar=LidarSpec(columns=args.columns, range_noise=args.range_noise),
        noise=noise, seed=args.seed)
    if args.frames < 2:
        raise InputError("need at least 2 frames")
    out = write_dataset(args.output, simulate(spec))
    cfg = PipelineConfig(input=".", output="out", seed=args.seed, imu=noise)
    save_config(out / "config.toml", cfg)
    print(f"wrote {args.frames} frames to {out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    est = load_trajectory(args.estimate)
    gt = load_trajectory(args.groundtruth)
    report = evaluate(est, gt, args.max_dt, args.align)
    print(report.table(args.name), end="")
    if args.output is not None:
        write_report(args.output, report, args.name)
        write_xy_csv(Path(args.output) / "xy.csv", {args.name: est, "groundtruth": gt})
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    checks = run_all(args.seed, args.instances)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "simulate": _cmd_simulate, "evaluate": _cmd_evaluate,
                "selftest": _cmd_selftest}
    try:
        return handlers[args.command](args)
    except (InputError, ConfigError, FormatError, AssociationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
