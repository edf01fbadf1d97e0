"""Two-stage motion-distortion compensation.

A sweep's points are stored in the sensor frame at their own capture time.
The scan pose refers to the sensor at the end of the sweep (relative time 1),
which is also the timestamp the IMU window and the solver use.
"""
from __future__ import annotations

import logging

import numpy as np

from .features import RawScan
from .imu import GRAVITY, PreintegratedImu, RobotState
from .lie import inverse_transform, se3_exp_many, se3_log

log = logging.getLogger(__name__)


def _apply_per_point(scan: RawScan, transforms: np.ndarray) -> RawScan:
    pts = np.einsum("nij,nj->ni", transforms[:, :3, :3], scan.points) + transforms[:, :3, 3]
    return scan.with_points(pts)


def _grouped_transforms(times: np.ndarray, make) -> np.ndarray:
    """``make`` maps an array of distinct times to (n, 4, 4) transforms.

    Scans share timestamps across rings, so each is evaluated once.
    """
    uniq, inv = np.unique(times, return_inverse=True)
    table = make(uniq) if len(uniq) else np.zeros((0, 4, 4))
    return table[inv.reshape(-1)]


def first_stage(scan: RawScan, pre: PreintegratedImu | None, prev_state: RobotState,
                reference: float = 1.0, g: np.ndarray = GRAVITY,
                fallback_motion: np.ndarray | None = None, period: float | None = None) -> RawScan:
    """Deskew with the IMU-predicted motion over the sweep.

    ``pre`` must start at ``prev_state`` and end with the sweep; the sweep
    lasts ``period`` seconds (default: the whole preintegration window). Points are
    expressed in the sensor frame at relative time ``reference`` (1 = sweep
    end, 0 = sweep start). Without IMU coverage, ``fallback_motion`` (the
    SE(3) tangent of the previous inter-scan motion) drives a constant
    velocity model.
    """
    if len(scan) == 0:
        return scan
    if pre is None:
        if fallback_motion is None:
            log.warning("no IMU coverage and no motion history; scan left distorted")
            return scan
        log.info("deskew degraded to constant-velocity model")
        return constant_velocity(scan, fallback_motion, reference)

    t1 = pre.times[-1]
    sweep = t1 - pre.times[0] if period is None else period

    def world_poses(s: np.ndarray) -> np.ndarray:
        R, P = pre.poses_at(prev_state, t1 - (1.0 - np.asarray(s)) * sweep, g)
        T = np.tile(np.eye(4), (len(R), 1, 1))
        T[:, :3, :3], T[:, :3, 3] = R, P
        return T

    ref_inv = inverse_transform(world_poses(np.array([reference]))[0])
    transforms = _grouped_transforms(scan.time, lambda s: ref_inv @ world_poses(s))
    return _apply_per_point(scan, transforms)


def constant_velocity(scan: RawScan, motion: np.ndarray, reference: float = 1.0) -> RawScan:
    """Deskew assuming the sweep moved by ``exp(motion)`` from start to end."""
    motion = np.asarray(motion, dtype=float)
    transforms = _grouped_transforms(scan.time, lambda s: se3_exp_many((s - reference)[:, None] * motion))
    return _apply_per_point(scan, transforms)


def relative_motion(T_i: np.ndarray, T_j: np.ndarray) -> np.ndarray:
    """Tangent taking the sweep-end frame back to the sweep-start frame: log(T_j^-1 T_i)."""
    return se3_log(inverse_transform(T_j) @ T_i)


def second_stage(scan: RawScan, T_i: np.ndarray, T_j_star: np.ndarray,
                 use_time: bool = True, scale: float = 1.0) -> RawScan:
    """Re-deskew the raw sweep with the optimised end pose.

    Point ``n`` of ``N`` is moved by exp(((N - n) / N) * dxi) with
    dxi = log(T_j*^-1 T_i); n/N is the relative timestamp when available,
    otherwise the acquisition ordinal. ``scale`` is the sweep period over
    the time between the two poses, for sweeps shorter than the frame gap.
    """
    if len(scan) == 0:
        return scan
    dxi = relative_motion(T_i, T_j_star)
    if use_time:
        frac = scan.time
    else:
        N = len(scan)
        frac = np.arange(N) / N
    back = scale * (1.0 - np.asarray(frac, dtype=float))
    transforms = _grouped_transforms(back, lambda a: se3_exp_many(a[:, None] * dxi))
    return _apply_per_point(scan, transforms)
