"""On-disk formats for scans, IMU streams and trajectories.

Scan format A is the KITTI velodyne layout: little-endian float32
(x, y, z, intensity) records, ring and time reconstructed from angles.
Scan format B is the native layout written by the simulator: packed
little-endian (x, y, z, intensity: float32, ring: uint16, rel_time: float32).
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import RawScan
from .imu import ImuData
from .lie import quat_from_rotation, rotation_from_quat

log = logging.getLogger(__name__)

RECORD_A = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])
RECORD_B = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"),
                     ("ring", "<u2"), ("time", "<f4")])


class FormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True)
class SensorModel:
    """Vertical layout and spin direction used to rebuild ring/time for format A.

    Rings are assumed evenly spaced between ``elev_min`` and ``elev_max``
    (degrees). The sweep starts at ``start_azimuth`` (degrees) and turns
    clockwise seen from above when ``clockwise`` is set.
    """

    name: str = "hdl64"
    rings: int = 64
    elev_min: float = -24.8
    elev_max: float = 2.0
    start_azimuth: float = 180.0
    clockwise: bool = True
    # a point may sit this many ring spacings outside the nominal fan
    tolerance: float = 1.0
    # a frame where more points than this fraction fail is dropped
    max_fail_fraction: float = 0.5


SENSOR_MODELS = {
    "hdl64": SensorModel(),
    "vlp16": SensorModel("vlp16", 16, -15.0, 15.0, 180.0, True),
    "sim16": SensorModel("sim16", 16, -15.0, 15.0, 180.0, False),
}


@dataclass
class Trajectory:
    """Timestamped body-to-world poses."""

    t: np.ndarray
    R: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.P = np.asarray(self.P, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.R) == len(self.P)):
            raise ValueError("trajectory arrays differ in length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def transforms(self) -> np.ndarray:
        T = np.tile(np.eye(4), (len(self), 1, 1))
        T[:, :3, :3] = self.R
        T[:, :3, 3] = self.P
        return T

    @classmethod
    def from_transforms(cls, t, T) -> "Trajectory":
        T = np.asarray(T, dtype=float).reshape(-1, 4, 4)
        return cls(t, T[:, :3, :3], T[:, :3, 3])


def _file_size(path) -> int:
    return os.path.getsize(path)


def load_scan(path, fmt: str = "B", sensor: SensorModel | None = None) -> RawScan | None:
    """Read one sweep; returns None when format-A ring reconstruction fails for the frame."""
    fmt = fmt.upper()
    if fmt not in ("A", "B"):
        raise ValueError(f"unknown scan format {fmt!r}")
    dtype = RECORD_A if fmt == "A" else RECORD_B
    size = _file_size(path)
    if size == 0:
        log.warning("empty scan file %s", path)
        return RawScan.empty()
    if size % dtype.itemsize:
        bad = size - size % dtype.itemsize
        raise FormatError(f"{path}: truncated record at byte offset {bad} "
                          f"(record size {dtype.itemsize})")
    rec = np.fromfile(path, dtype=dtype)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
    finite = np.all(np.isfinite(xyz), axis=1)
    if not np.all(finite):
        k = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"{path}: non-finite coordinates at byte offset {k * dtype.itemsize}")
    intensity = rec["intensity"].astype(float)
    if fmt == "B":
        return RawScan(xyz, rec["ring"].astype(np.int64), rec["time"].astype(float), intensity)
    return reconstruct_rings(xyz, intensity, sensor or SENSOR_MODELS["hdl64"], str(path))


def reconstruct_rings(xyz: np.ndarray, intensity: np.ndarray, sensor: SensorModel,
                      name: str = "scan") -> RawScan | None:
    """Assign ring from elevation and relative time from azimuth, sorted per ring by time."""
    if len(xyz) == 0:
        return RawScan.empty()
    horiz = np.hypot(xyz[:, 0], xyz[:, 1])
    elev = np.degrees(np.arctan2(xyz[:, 2], horiz))
    if sensor.rings > 1:
        step = (sensor.elev_max - sensor.elev_min) / (sensor.rings - 1)
        ring_f = (elev - sensor.elev_min) / step
    else:
        step = 1.0
        ring_f = np.zeros(len(xyz))
    ring = np.rint(ring_f).astype(np.int64)
    ok = (ring_f > -sensor.tolerance) & (ring_f < sensor.rings - 1 + sensor.tolerance) & (horiz > 0)
    fail = 1.0 - ok.mean()
    if fail > sensor.max_fail_fraction:
        log.warning("%s: ring reconstruction failed for %.0f%% of points; frame dropped", name, 100 * fail)
        return None
    ring = np.clip(ring, 0, sensor.rings - 1)
    az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    turn = (sensor.start_azimuth - az) if sensor.clockwise else (az - sensor.start_azimuth)
    time = np.mod(turn, 360.0) / 360.0
    scan = RawScan(xyz[ok], ring[ok], time[ok], intensity[ok])
    order = np.lexsort((scan.time, scan.ring))
    return scan.subset(order)


def save_scan(path, scan: RawScan, fmt: str = "B") -> None:
    fmt = fmt.upper()
    if fmt == "A":
        rec = np.zeros(len(scan), dtype=RECORD_A)
    elif fmt == "B":
        rec = np.zeros(len(scan), dtype=RECORD_B)
        rec["ring"] = scan.ring
        rec["time"] = scan.time
    else:
        raise ValueError(f"unknown scan format {fmt!r}")
    rec["x"], rec["y"], rec["z"] = scan.points.T
    rec["intensity"] = scan.intensity
    rec.tofile(path)


def _read_table(path, ncols: int, what: str) -> np.ndarray:
    rows = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split(b"#", 1)[0].strip()
            if line:
                parts = line.split()
                try:
                    vals = [float(p) for p in parts]
                except ValueError:
                    vals = None
                if vals is None or len(vals) != ncols or not all(np.isfinite(vals)):
                    raise FormatError(f"{path}: malformed {what} line {lineno} at byte offset {offset}")
                rows.append(vals)
            offset += len(raw)
    return np.array(rows, dtype=float).reshape(-1, ncols)


def load_imu(path) -> ImuData:
    """Text lines ``t wx wy wz ax ay az`` (s, rad/s, m/s^2)."""
    a = _read_table(path, 7, "IMU")
    if len(a) == 0:
        raise FormatError(f"{path}: no IMU samples")
    return ImuData(a[:, 0], a[:, 1:4], a[:, 4:7])


def save_imu(path, imu: ImuData) -> None:
    np.savetxt(path, np.column_stack([imu.t, imu.gyro, imu.acc]), fmt="%.17g")


def load_trajectory(path) -> Trajectory:
    """Text lines ``t tx ty tz qx qy qz qw``."""
    a = _read_table(path, 8, "pose")
    R = np.stack([rotation_from_quat(q) for q in a[:, 4:8]]) if len(a) else np.zeros((0, 3, 3))
    return Trajectory(a[:, 0], R, a[:, 1:4])


load_gt = load_trajectory


def save_trajectory(path, traj: Trajectory) -> None:
    q = np.stack([quat_from_rotation(R) for R in traj.R]) if len(traj) else np.zeros((0, 4))
    np.savetxt(path, np.column_stack([traj.t, traj.P, q]), fmt="%.17g")


def load_times(path) -> np.ndarray:
    return _read_table(path, 1, "timestamp")[:, 0]


def save_times(path, times) -> None:
    np.savetxt(path, np.asarray(times, dtype=float), fmt="%.17g")


def scan_paths(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix == ".bin")
