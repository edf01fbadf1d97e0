"""Synthetic box-room worlds, ground-vehicle trajectories, IMU streams and LiDAR sweeps.

The world frame is the sensor frame of the first pose: the floor sits at
``z = -sensor_height`` and gravity points along -z.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .dataio import Trajectory as DataTrajectory
from .dataio import save_imu, save_scan, save_times, save_trajectory
from .features import RawScan
from .imu import GRAVITY, ImuBias, ImuData, ImuNoiseParams
from .lie import make_transform, right_jacobian, so3_exp, so3_exp_many, yaw_rotation


@dataclass
class Rect:
    """Planar rectangle: centre, unit normal, in-plane unit axes and half extents."""

    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float


@dataclass
class SyntheticWorld:
    planes: list[Rect] = field(default_factory=list)
    edges: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def add_box(self, lo, hi, inward: bool = False) -> None:
        """Axis-aligned box; ``inward`` normals for a room, outward for a pillar."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        c = 0.5 * (lo + hi)
        h = 0.5 * (hi - lo)
        eye = np.eye(3)
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            for sign in (-1.0, 1.0):
                center = c.copy()
                center[axis] += sign * h[axis]
                normal = eye[axis] * (-sign if inward else sign)
                self.planes.append(Rect(center, normal, eye[a], eye[b], h[a], h[b]))
        corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
        for k in range(4):
            x0, y0 = corners[k]
            x1, y1 = corners[(k + 1) % 4]
            for z in (lo[2], hi[2]):
                self.edges.append((np.array([x0, y0, z]), np.array([x1, y1, z])))
            self.edges.append((np.array([x0, y0, lo[2]]), np.array([x0, y0, hi[2]])))

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = 100.0) -> np.ndarray:
        """Distance along each unit ray to the nearest primitive (inf when nothing is hit)."""
        origins = np.broadcast_to(origins, dirs.shape)
        best = np.full(len(dirs), np.inf)
        for rect in self.planes:
            denom = dirs @ rect.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((rect.center - origins) @ rect.normal) / denom
            ok = np.isfinite(t) & (t > 1e-9) & (t < best)
            if not ok.any():
                continue
            hit = origins[ok] + t[ok, None] * dirs[ok] - rect.center
            inside = (np.abs(hit @ rect.u) <= rect.half_u + 1e-12) & (np.abs(hit @ rect.v) <= rect.half_v + 1e-12)
            idx = np.flatnonzero(ok)[inside]
            best[idx] = t[idx]
        best[best > max_range] = np.inf
        return best

    def distance_to_edges(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest edge segment."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.full(len(points), np.inf)
        for a, b in self.edges:
            ab = b - a
            s = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
            d = np.linalg.norm(points - (a + s[:, None] * ab), axis=1)
            out = np.minimum(out, d)
        return out


def box_world(length: float = 40.0, width: float = 24.0, height: float = 4.0,
              sensor_height: float = 1.0, origin=(-10.0, 0.0), pillars: int = 8,
              pillar_size: float = 0.8, seed: int = 0) -> SyntheticWorld:
    """Rectangular room around the start pose with square pillars.

    ``origin`` is the start position in room coordinates measured from the
    room centre; pillars stay clear of a 2 m disc around it.
    """
    rng = np.random.default_rng(seed)
    ox, oy = origin
    x0, x1 = -length / 2 - ox, length / 2 - ox
    y0, y1 = -width / 2 - oy, width / 2 - oy
    z0, z1 = -sensor_height, height - sensor_height
    world = SyntheticWorld()
    world.add_box([x0, y0, z0], [x1, y1, z1], inward=True)
    placed = 0
    while placed < pillars:
        cx = rng.uniform(x0 + 2.0, x1 - 2.0)
        cy = rng.uniform(y0 + 2.0, y1 - 2.0)
        if np.hypot(cx, cy) < 2.0 or abs(cy) < 1.5:
            # keep the start area and the main corridor free
            continue
        h = pillar_size / 2
        world.add_box([cx - h, cy - h, z0], [cx + h, cy + h, z1])
        placed += 1
    return world


@dataclass(frozen=True)
class LidarSpec:
    rings: int = 16
    elev_min: float = -15.0
    elev_max: float = 15.0
    columns: int = 900
    range_noise: float = 0.0
    max_range: float = 100.0

    def elevations(self) -> np.ndarray:
        return np.deg2rad(np.linspace(self.elev_min, self.elev_max, self.rings))

    def azimuths(self) -> np.ndarray:
        return -np.pi + 2.0 * np.pi * np.arange(self.columns) / self.columns

    def directions(self) -> np.ndarray:
        """(rings, columns, 3) unit ray directions in the sensor frame."""
        e = self.elevations()[:, None]
        a = self.azimuths()[None, :]
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a),
                         np.broadcast_to(np.sin(e), (self.rings, self.columns))], axis=-1)


@dataclass(frozen=True)
class TrajectorySpec:
    duration: float = 10.0
    speed: float = 1.0
    speed_wobble: float = 0.3
    speed_period: float = 4.0
    yaw_rate: float = 0.3
    yaw_period: float = 6.0
    ramp: float = 1.0
    sigma_z: float = 0.0
    cov_theta: np.ndarray | float = 0.0
    sweep_rate: float = 10.0
    imu_rate: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.sweep_rate <= 0 or self.imu_rate <= 0:
            raise ValueError("rates must be positive")
        if self.imu_rate < 10 * self.sweep_rate:
            raise ValueError("IMU rate must be at least 10x the sweep rate")


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _smoothstep_dot(x):
    inside = (x > 0.0) & (x < 1.0)
    return np.where(inside, 6.0 * x * (1.0 - x), 0.0)


class Trajectory:
    """Continuous ground-truth motion: planar base path plus out-of-plane perturbations."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        s = spec
        self.sweep_times = np.arange(0.0, s.duration + 1e-9, 1.0 / s.sweep_rate)
        sol = solve_ivp(self._base_rhs, (0.0, s.duration + 1.0), np.zeros(3),
                        method="DOP853", rtol=1e-12, atol=1e-12, dense_output=True)
        self._base = sol.sol

        rng = np.random.default_rng(s.seed)
        n = len(self.sweep_times)
        cov = np.asarray(s.cov_theta, dtype=float)
        cov = cov * np.eye(2) if cov.ndim == 0 else cov.reshape(2, 2)
        eta_z = rng.normal(0.0, 1.0, n) * s.sigma_z
        if np.any(cov):
            eta_t = rng.multivariate_normal(np.zeros(2), cov, size=n, method="cholesky")
        else:
            eta_t = np.zeros((n, 2))
        # the first pose is the world origin
        eta_z[0] = 0.0
        eta_t[0] = 0.0
        knots = np.append(self.sweep_times, self.sweep_times[-1] + 1.0 / s.sweep_rate)
        self._ez = CubicSpline(knots, np.append(eta_z, 0.0), bc_type="clamped")
        self._et = CubicSpline(knots, np.vstack([eta_t, np.zeros(2)]), bc_type="clamped")

    def speed(self, t):
        s = self.spec
        return s.speed * _smoothstep(t / s.ramp) * (1.0 + s.speed_wobble * np.sin(2 * np.pi * t / s.speed_period))

    def speed_dot(self, t):
        s = self.spec
        ramp = _smoothstep(t / s.ramp)
        ramp_dot = _smoothstep_dot(t / s.ramp) / s.ramp
        wob = 1.0 + s.speed_wobble * np.sin(2 * np.pi * t / s.speed_period)
        wob_dot = s.speed_wobble * np.cos(2 * np.pi * t / s.speed_period) * 2 * np.pi / s.speed_period
        return s.speed * (ramp_dot * wob + ramp * wob_dot)

    def yaw_rate(self, t):
        s = self.spec
        return s.yaw_rate * _smoothstep(t / s.ramp) * np.sin(2 * np.pi * t / s.yaw_period)

    def _base_rhs(self, t, y):
        v = self.speed(t)
        return [v * np.cos(y[2]), v * np.sin(y[2]), self.yaw_rate(t)]

    def _eta(self, t):
        t = np.clip(t, 0.0, None)
        return (self._et(t), self._et(t, 1), self._ez(t), self._ez(t, 2))

    def pose(self, t: float) -> np.ndarray:
        """4x4 body-to-world transform; the vehicle rests at the origin for t < 0."""
        if t <= 0.0:
            return np.eye(4)
        x, y, yaw = self._base(t)
        eta_t, _, eta_z, _ = self._eta(t)
        R = so3_exp(np.array([eta_t[0], eta_t[1], 0.0])) @ yaw_rotation(yaw)
        return make_transform(R, np.array([x, y, float(eta_z)]))

    def poses(self, ts) -> np.ndarray:
        """Vectorised ``pose`` over an array of times."""
        ts = np.asarray(ts, dtype=float).reshape(-1)
        out = np.tile(np.eye(4), (len(ts), 1, 1))
        live = ts > 0.0
        if not live.any():
            return out
        t = ts[live]
        x, y, yaw = self._base(t)
        eta_t = np.atleast_2d(self._et(t))
        eta = np.column_stack([eta_t, np.zeros(len(t))])
        c, s = np.cos(yaw), np.sin(yaw)
        Rz = np.zeros((len(t), 3, 3))
        Rz[:, 0, 0], Rz[:, 0, 1], Rz[:, 1, 0], Rz[:, 1, 1], Rz[:, 2, 2] = c, -s, s, c, 1.0
        out[live, :3, :3] = so3_exp_many(eta) @ Rz
        out[live, :3, 3] = np.column_stack([x, y, self._ez(t)])
        return out

    def base_pose(self, t: float) -> np.ndarray:
        if t <= 0.0:
            return np.eye(4)
        x, y, yaw = self._base(t)
        return make_transform(yaw_rotation(yaw), np.array([x, y, 0.0]))

    def velocity(self, t: float) -> np.ndarray:
        if t <= 0.0:
            return np.zeros(3)
        _, _, yaw = self._base(t)
        v = self.speed(t)
        return np.array([v * np.cos(yaw), v * np.sin(yaw), float(self._ez(t, 1))])

    def kinematics(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(R, body angular velocity, world acceleration) at ``t``."""
        if t <= 0.0:
            return np.eye(3), np.zeros(3), np.zeros(3)
        _, _, yaw = self._base(t)
        v, vd, w = self.speed(t), self.speed_dot(t), self.yaw_rate(t)
        eta_t, eta_t_dot, _, eta_z_dd = self._eta(t)
        eta = np.array([eta_t[0], eta_t[1], 0.0])
        eta_dot = np.array([eta_t_dot[0], eta_t_dot[1], 0.0])
        Rz = yaw_rotation(yaw)
        R = so3_exp(eta) @ Rz
        omega = Rz.T @ right_jacobian(eta) @ eta_dot + np.array([0.0, 0.0, w])
        c, s = np.cos(yaw), np.sin(yaw)
        acc = np.array([vd * c - v * w * s, vd * s + v * w * c, float(eta_z_dd)])
        return R, omega, acc


def gen_trajectory(spec: TrajectorySpec) -> tuple[np.ndarray, np.ndarray, Trajectory]:
    """Ground-truth poses sampled at the IMU rate: (times, (n, 4, 4) poses, continuous trajectory)."""
    traj = Trajectory(spec)
    times = np.arange(0.0, spec.duration + 1e-9, 1.0 / spec.imu_rate)
    return times, np.stack([traj.pose(t) for t in times]), traj


def synth_imu(traj: Trajectory, noise: ImuNoiseParams, bias: ImuBias = ImuBias(),
              times: np.ndarray | None = None, seed: int | None = None) -> ImuData:
    """Forward IMU model: bias and white noise added to the true specific force and rate."""
    spec = traj.spec
    if times is None:
        times = np.arange(-0.5, spec.duration + 1e-9, 1.0 / spec.imu_rate)
    rng = np.random.default_rng(spec.seed + 7919 if seed is None else seed)
    dt = 1.0 / spec.imu_rate
    gyro = np.empty((len(times), 3))
    acc = np.empty((len(times), 3))
    for k, t in enumerate(times):
        R, omega, a = traj.kinematics(t)
        gyro[k] = omega + bias.bg
        acc[k] = R.T @ (a - noise.g) + bias.ba
    gyro += rng.normal(0.0, 1.0, gyro.shape) * noise.sigma_g / np.sqrt(dt)
    acc += rng.normal(0.0, 1.0, acc.shape) * noise.sigma_a / np.sqrt(dt)
    return ImuData(times, gyro, acc)


def synth_scan(world: SyntheticWorld, pose: np.ndarray | Trajectory | Callable[[float], np.ndarray],
               lidar: LidarSpec = LidarSpec(), t_end: float = 0.0, period: float = 0.1,
               rng: np.random.Generator | None = None) -> RawScan:
    """Ray-cast one sweep.

    ``pose`` is a fixed 4x4 transform, a Trajectory or a function of time;
    in the latter two cases column ``n`` is fired at ``t_end - period + period * n / columns`` so
    the sweep carries motion distortion. Points are in the sensor frame at
    their own firing time.
    """
    dirs = lidar.directions()
    rings, cols = lidar.rings, lidar.columns
    rel = np.arange(cols) / cols
    fire = t_end - period + period * rel
    if isinstance(pose, Trajectory):
        Ts = pose.poses(fire)
    elif callable(pose):
        Ts = np.stack([pose(t) for t in fire])
    else:
        Ts = np.broadcast_to(np.asarray(pose, dtype=float), (cols, 4, 4))
    # world-frame rays, one sensor pose per column
    origins = np.broadcast_to(Ts[None, :, :3, 3], (rings, cols, 3)).reshape(-1, 3)
    world_dirs = np.einsum("cij,rcj->rci", Ts[:, :3, :3], dirs).reshape(-1, 3)
    ranges = world.raycast(origins, world_dirs, lidar.max_range).reshape(rings, cols)
    if lidar.range_noise > 0:
        rng = rng or np.random.default_rng(0)
        ranges = ranges + rng.normal(0.0, lidar.range_noise, ranges.shape)
    ok = np.isfinite(ranges)
    pts = np.where(ok, ranges, 0.0)[..., None] * dirs
    ring = np.broadcast_to(np.arange(rings)[:, None], (rings, cols))
    time = np.broadcast_to(rel[None, :], (rings, cols))
    return RawScan(pts[ok], ring[ok], time[ok], np.zeros(int(ok.sum())))


@dataclass(frozen=True)
class SimulationSpec:
    """Everything needed to write a synthetic dataset."""

    frames: int = 100
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    lidar: LidarSpec = field(default_factory=lambda: LidarSpec(columns=1800))
    noise: ImuNoiseParams = field(default_factory=lambda: ImuNoiseParams(0.0, 0.0, 0.0, 0.0))
    bias: ImuBias = field(default_factory=ImuBias)
    pillars: int = 8
    seed: int = 0


@dataclass
class SimulatedRun:
    world: SyntheticWorld
    trajectory: Trajectory
    times: np.ndarray
    scans: list
    imu: ImuData


def simulate(spec: SimulationSpec) -> SimulatedRun:
    """Synthesize ``spec.frames`` sweeps ending at the sweep times, plus the IMU stream."""
    ts = dataclasses.replace(spec.trajectory, seed=spec.seed,
                             duration=(spec.frames - 1) / spec.trajectory.sweep_rate)
    world = box_world(pillars=spec.pillars, seed=spec.seed)
    traj = Trajectory(ts)
    rng = np.random.default_rng(spec.seed + 104729)
    period = 1.0 / ts.sweep_rate
    times = traj.sweep_times[:spec.frames]
    scans = [synth_scan(world, traj, spec.lidar, t_end=t, period=period, rng=rng) for t in times]
    imu = synth_imu(traj, spec.noise, spec.bias, seed=spec.seed + 7919)
    return SimulatedRun(world, traj, times, scans, imu)


def ground_truth(run: SimulatedRun, rate: float | None = None) -> DataTrajectory:
    """True poses from the first sweep on, at ``rate`` Hz (default: the IMU rate)."""
    spec = run.trajectory.spec
    rate = rate or spec.imu_rate
    t = np.arange(0.0, run.times[-1] + 1e-9, 1.0 / rate)
    return DataTrajectory.from_transforms(t, run.trajectory.poses(t))


def write_dataset(out_dir, run: SimulatedRun) -> Path:
    """Write the on-disk layout the pipeline reads: times.txt, scans/, imu.txt, groundtruth.txt."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    save_times(out / "times.txt", run.times)
    for k, scan in enumerate(run.scans):
        save_scan(out / "scans" / f"{k:06d}.bin", scan, "B")
    save_imu(out / "imu.txt", run.imu)
    save_trajectory(out / "groundtruth.txt", ground_truth(run))
    return out
