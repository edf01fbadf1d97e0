"""Frame-by-frame odometry loop and dataset-level driver."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import PipelineConfig, save_config
from .dataio import (Trajectory, load_imu, load_scan, load_times, load_trajectory, save_trajectory,
                     scan_paths)
from .deskew import constant_velocity, first_stage, relative_motion, second_stage
from .features import FeatureScan, RawScan, extract
from .imu import BA, BG, GRAVITY, MAX_STEP, PHI, POS, VEL, ImuBias, ImuData, RobotState, preintegrate
from .lie import inverse_transform, make_transform, se3_exp, se3_log, yaw_of
from .map import FeatureMap
from .solver import ImuFactor, Se2Pose, estimate

log = logging.getLogger(__name__)

EXIT_OK, EXIT_BAD_INPUT, EXIT_DEGENERATE = 0, 2, 3
# a run with more non-converged frames than this is reported as degenerate
MAX_NONCONVERGED = 0.1


class InputError(ValueError):
    """Bad or inconsistent input data."""


class StreamGapError(InputError):
    pass


@dataclass
class FrameResult:
    t: float
    state: RobotState
    iterations: int
    converged: bool
    degenerate: bool
    n_edge: int
    n_plane: int
    wall_ms: float


@dataclass
class Dataset:
    times: np.ndarray
    scan: Callable[[int], RawScan | None]
    imu: ImuData | None = None
    gt: Trajectory | None = None

    def __len__(self) -> int:
        return len(self.times)


def load_dataset(root, cfg: PipelineConfig) -> Dataset:
    """Directory with ``times.txt``, ``scans/*.bin`` and optionally ``imu.txt``, ``groundtruth.txt``."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset directory {root} does not exist")
    times_file = root / "times.txt"
    if not times_file.exists():
        raise InputError(f"{times_file} missing")
    scan_dir = root / "scans"
    if not scan_dir.is_dir():
        scan_dir = root / "velodyne"
    if not scan_dir.is_dir():
        raise InputError(f"no scans/ or velodyne/ directory under {root}")
    times = load_times(times_file)
    paths = scan_paths(scan_dir)
    if len(paths) != len(times):
        raise InputError(f"{len(paths)} scan files but {len(times)} timestamps")
    imu = load_imu(root / "imu.txt") if (root / "imu.txt").exists() else None
    gt = load_trajectory(root / "groundtruth.txt") if (root / "groundtruth.txt").exists() else None

    def scan(k: int) -> RawScan | None:
        return load_scan(paths[k], cfg.scan_format, cfg.sensor)

    return Dataset(times, scan, imu, gt)


def in_memory(times: Sequence[float], scans: Sequence[RawScan], imu: ImuData | None = None,
              gt: Trajectory | None = None) -> Dataset:
    scans = list(scans)
    return Dataset(np.asarray(times, dtype=float), lambda k: scans[k], imu, gt)


def resolve_mode(cfg: PipelineConfig, imu: ImuData | None) -> str:
    """Fall back to the LiDAR-only mode when the IMU is missing or too slow."""
    if cfg.mode == "se2lo":
        return "se2lo"
    if imu is None:
        log.warning("no IMU data; running se2lo")
        return "se2lo"
    rate = imu.rate()
    if rate < cfg.min_imu_rate and not cfg.force_mode:
        log.warning("IMU rate %.1f Hz below %.0f Hz; running se2lo", rate, cfg.min_imu_rate)
        return "se2lo"
    return cfg.mode


def _pose(state: RobotState) -> np.ndarray:
    return make_transform(state.R, state.P)


class Odometry:
    """Sequential estimator; feed scans in time order with ``process``."""

    def __init__(self, cfg: PipelineConfig, imu: ImuData | None = None, mode: str | None = None):
        self.cfg = cfg
        self.mode = mode or resolve_mode(cfg, imu)
        self.imu = imu if self.mode != "se2lo" else None
        self.model = cfg.with_mode(self.mode).effective_perturbation()
        self.map = FeatureMap(cfg.map, workers=cfg.threads)
        self.g = np.asarray(cfg.imu.g, dtype=float)
        self.state: RobotState | None = None
        self.cov: np.ndarray | None = None
        self.t: float | None = None
        self.motion: np.ndarray | None = None
        self.frames: list[FrameResult] = []

    def _initial_cov(self) -> np.ndarray:
        c = self.cfg
        d = np.empty(15)
        d[PHI] = d[POS] = c.init_sigma_pose**2
        d[VEL] = c.init_sigma_vel**2
        d[BA] = c.init_sigma_ba**2
        d[BG] = c.init_sigma_bg**2
        return np.diag(d)

    def _insert(self, feats: FeatureScan, T: np.ndarray) -> None:
        R, P = T[:3, :3], T[:3, 3]
        self.map.insert(feats.edges.points @ R.T + P, "edge")
        self.map.insert(feats.surface.points @ R.T + P, "plane")
        self.map.window(P)

    def process(self, t: float, scan: RawScan, period: float | None = None) -> FrameResult:
        """Estimate the pose at ``t``, the end of the sweep ``scan``.

        ``period`` is the sweep duration; it defaults to the time since the
        previous frame.
        """
        start = time.perf_counter()
        t = float(t)
        feats = extract(scan, self.cfg.features)
        if self.state is None:
            self.state = RobotState(np.eye(3), np.zeros(3), np.zeros(3), ImuBias())
            self.cov = self._initial_cov()
            self.t = t
            self._insert(feats, np.eye(4))
            return self._record(t, 0, True, False, 0, 0, start)

        dt = t - self.t
        if dt <= 0:
            raise InputError(f"scan timestamps not increasing at t={t}")
        if dt > self.cfg.max_gap:
            raise StreamGapError(f"scan stream gap of {dt:.3f} s before t={t:.6f}")
        period = dt if period is None else min(period, dt)
        prev = self.state
        T_prev = _pose(prev)

        factor = None
        if self.imu is not None:
            win = self._imu_window(self.t, t)
            pre = preintegrate(win, prev.bias, self.cfg.imu)
            guess = pre.predict(prev, self.g)
            dfeats = feats.map(lambda s: first_stage(s, pre, prev, 1.0, self.g, period=period),
                              ("edges", "planars"))
            factor = ImuFactor(pre, prev, self.cov, self.g)
        else:
            pre = None
            if self.motion is None:
                step = np.zeros(6)
                dfeats = feats
            else:
                # constant velocity from the previous inter-frame motion
                step = self.motion * dt
                sweep = self.motion * period
                dfeats = feats.map(lambda s: constant_velocity(s, sweep), ("edges", "planars"))
            T_guess = T_prev @ se3_exp(step)
            guess = RobotState(T_guess[:3, :3], T_guess[:3, 3], prev.V.copy(), prev.bias)

        res = estimate(dfeats, self.map, factor, guess, self.model, self.cfg.solver)
        degenerate = len(res.costs) == 0 or (res.n_edge + res.n_plane) < self.cfg.solver.min_correspondences
        if degenerate:
            # keep the prediction and leave the map untouched
            new = guess
            cov = self.cov + pre.cov if pre is not None else None
        else:
            new = res.state
            cov = res.cov if pre is not None else None
            T_i = _pose(res.state_i) if res.state_i is not None else T_prev
            T_j = _pose(new)
            final = feats.map(lambda s: second_stage(s, T_i, T_j, scale=period / dt), ("edges", "surface"))
            # the map lives in the plane: points go in with the SE(2) part of the pose
            R2, P2 = Se2Pose.from_state(new).lift()
            self._insert(final, make_transform(R2, P2))
        if pre is None:
            # planar-only mode carries no velocity in the state; derive it from the motion
            new = RobotState(new.R, new.P, (new.P - prev.P) / dt, new.bias)
        self.motion = se3_log(inverse_transform(T_prev) @ _pose(new)) / dt
        self.state, self.cov, self.t = new, cov, t
        return self._record(t, res.iterations, res.converged, degenerate, res.n_edge, res.n_plane, start)

    def _imu_window(self, t0: float, t1: float) -> ImuData:
        try:
            win = self.imu.window(t0, t1)
        except ValueError as e:
            raise StreamGapError(str(e)) from e
        # look at the raw samples around the window; interpolated endpoints can hide a hole
        t = self.imu.t
        lo = max(int(np.searchsorted(t, t0, "right")) - 1, 0)
        hi = int(np.searchsorted(t, t1, "left"))
        gap = np.diff(t[lo:hi + 1]).max()
        if gap > self.cfg.max_gap:
            raise StreamGapError(f"IMU stream gap of {gap:.3f} s around [{t0:.6f}, {t1:.6f}]")
        if np.diff(win.t).max() > MAX_STEP:
            raise InputError(f"IMU samples {np.diff(win.t).max():.3f} s apart in [{t0:.6f}, {t1:.6f}]; "
                             "too sparse to preintegrate")
        return win

    def _record(self, t, iterations, converged, degenerate, n_edge, n_plane, start) -> FrameResult:
        wall = max((time.perf_counter() - start) * 1e3, 1e-6)
        fr = FrameResult(t, self.state.copy(), iterations, converged, degenerate, n_edge, n_plane, wall)
        self.frames.append(fr)
        log.debug("t=%.3f it=%d edges=%d planes=%d %.1f ms yaw=%.4f", t, iterations, n_edge, n_plane,
                  wall, yaw_of(self.state.R))
        return fr


@dataclass
class RunResult:
    mode: str
    trajectory: Trajectory
    frames: list[FrameResult] = field(default_factory=list)
    map: FeatureMap | None = None
    dropped: int = 0

    @property
    def nonconverged_fraction(self) -> float:
        if not self.frames:
            return 0.0
        bad = sum(1 for f in self.frames[1:] if not f.converged)
        return bad / max(len(self.frames) - 1, 1)

    @property
    def exit_code(self) -> int:
        return EXIT_DEGENERATE if self.nonconverged_fraction > MAX_NONCONVERGED else EXIT_OK


def run_dataset(data: Dataset, cfg: PipelineConfig, frames: int | None = None) -> RunResult:
    odo = Odometry(cfg, data.imu)
    n = len(data) if frames is None else min(frames, len(data))
    ts, Rs, Ps = [], [], []
    dropped = 0
    prev_t = None
    for k in range(n):
        scan = data.scan(k)
        if scan is None:
            dropped += 1
            continue
        t = float(data.times[k])
        period = None if prev_t is None or k == 0 else float(data.times[k] - data.times[k - 1])
        fr = odo.process(t, scan, period)
        prev_t = t
        ts.append(fr.t)
        Rs.append(fr.state.R)
        Ps.append(fr.state.P)
    traj = Trajectory(ts, np.array(Rs).reshape(-1, 3, 3), np.array(Ps).reshape(-1, 3))
    return RunResult(odo.mode, traj, odo.frames, odo.map, dropped)


def write_outputs(result: RunResult, cfg: PipelineConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectory(out / "trajectory.txt", result.trajectory)
    save_config(out / "config.toml", cfg.with_mode(result.mode))
    if result.map is not None:
        result.map.export(str(out / "map"))
    with open(out / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "yaw", "iterations", "converged", "degenerate",
                    "n_edge", "n_plane", "wall_ms"])
        for f in result.frames:
            w.writerow([repr(f.t), *(repr(float(v)) for v in f.state.P), repr(yaw_of(f.state.R)),
                        f.iterations, int(f.converged), int(f.degenerate), f.n_edge, f.n_plane,
                        f"{f.wall_ms:.3f}"])
    walls = [f.wall_ms for f in result.frames]
    if walls:
        log.info("%d frames, median %.1f ms/frame, %.1f%% not converged", len(walls),
                 float(np.median(walls)), 100 * result.nonconverged_fraction)


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get("SE2LIO_THREADS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"SE2LIO_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InputError("SE2LIO_THREADS must be >= 1")
    return n


def run(cfg: PipelineConfig, frames: int | None = None) -> RunResult:
    """Load ``cfg.input``, run odometry and write everything to ``cfg.output``."""
    if cfg.input is None:
        raise InputError("no input dataset configured")
    data = load_dataset(cfg.input, cfg)
    result = run_dataset(data, cfg, frames)
    if cfg.output is not None:
        write_outputs(result, cfg, cfg.output)
    return result


__all__ = ["FrameResult", "Dataset", "Odometry", "RunResult", "load_dataset", "in_memory",
           "run_dataset", "write_outputs", "run", "resolve_mode", "InputError", "StreamGapError",
           "GRAVITY"]
