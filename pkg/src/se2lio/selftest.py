"""Quick numerical self-checks run by ``se2lio selftest``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataio import Trajectory
from .evaluate import associate, ate_are
from .imu import ImuBias, ImuData, ImuNoiseParams, RobotState, imu_jacobian, imu_residual, preintegrate
from .lie import right_jacobian, se3_exp, se3_log, so3_exp, so3_log
from .solver import (EdgeCorrespondence, PlaneCorrespondence, Se2Pose, edge_jacobian, edge_residual,
                     plane_jacobian, plane_residual)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], n: int, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` around a zero perturbation of size ``n``."""
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        cols.append((np.atleast_1d(f(e)) - np.atleast_1d(f(-e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-8))


def random_bias(rng) -> ImuBias:
    return ImuBias(rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.002)


def random_state(rng) -> RobotState:
    return RobotState(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 3, rng.normal(size=3), random_bias(rng))


def random_imu(rng, n: int = 20, dt: float = 0.005) -> ImuData:
    t = np.arange(n) * dt
    return ImuData(t, rng.normal(size=(n, 3)) * 0.5, rng.normal(size=(n, 3)) + [0, 0, 9.81])


def check_lie(rng, n: int) -> Check:
    worst = jac = 0.0
    for _ in range(n):
        axis = rng.normal(size=3)
        phi = axis / np.linalg.norm(axis) * rng.uniform(1e-6, 3.0)
        worst = max(worst, np.abs(so3_log(so3_exp(phi)) - phi).max())
        xi = np.concatenate([phi, rng.normal(size=3)])
        worst = max(worst, np.abs(se3_log(se3_exp(xi)) - xi).max())
        d = numeric_jacobian(lambda e: so3_log(so3_exp(phi).T @ so3_exp(phi + e)), 3)
        jac = max(jac, rel_error(right_jacobian(phi), d))
    return Check("Lie exp/log and right Jacobian", worst < 1e-9 and jac < 1e-6,
                 f"round trip {worst:.2e}, Jacobian {jac:.2e}")


def check_imu_jacobian(rng, n: int) -> Check:
    worst = 0.0
    noise = ImuNoiseParams()
    for _ in range(n):
        pre = preintegrate(random_imu(rng), random_bias(rng), noise)
        si, sj = random_state(rng), random_state(rng)
        J = imu_jacobian(si, sj, pre)
        num = numeric_jacobian(lambda e: imu_residual(si.boxplus(e[:15]), sj.boxplus(e[15:]), pre), 30)
        worst = max(worst, rel_error(J, num))
    return Check("IMU residual Jacobian", worst < 1e-4, f"max relative error {worst:.2e}")


def check_lidar_jacobians(rng, n: int) -> Check:
    worst = 0.0
    for _ in range(n):
        pose = Se2Pose(rng.uniform(-np.pi, np.pi), rng.normal(size=2) * 5)
        p = rng.normal(size=3) * 5
        e = EdgeCorrespondence(p, rng.normal(size=3) * 5, rng.normal(size=3) * 5)
        c = PlaneCorrespondence(p, *(rng.normal(size=(3, 3)) * 5))

        def moved(d):
            return Se2Pose(pose.yaw + d[2], pose.d + d[:2])

        for res, jac, corr in ((edge_residual, edge_jacobian, e), (plane_residual, plane_jacobian, c)):
            num = numeric_jacobian(lambda d: res(corr, moved(d)), 3)
            worst = max(worst, rel_error(jac(corr, pose).reshape(1, 3), num))
    return Check("LiDAR residual Jacobians", worst < 1e-4, f"max relative error {worst:.2e}")


def check_metrics() -> Check:
    t = np.arange(5.0)
    R = np.tile(np.eye(3), (5, 1, 1))
    P = np.zeros((5, 3))
    gt = Trajectory(t, R, P)
    est = Trajectory(t, R, P + [3.0, 4.0, 0.0])
    ate, are = ate_are(associate(est, gt))
    return Check("ATE 3-4-5 case", ate == 5.0 and are == 0.0, f"ATE {ate!r}, ARE {are!r}")


def run_all(seed: int = 0, n: int = 100) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [check_lie(rng, n), check_imu_jacobian(rng, max(n // 10, 5)),
            check_lidar_jacobians(rng, n), check_metrics()]
