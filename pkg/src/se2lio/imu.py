"""IMU measurement model and mid-point preintegration between scans.

Error-state ordering used throughout (rotation right-perturbed, the rest
additive): [dphi, dP, dV, db_a, db_g].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lie import right_jacobian, right_jacobian_inv, skew, so3_exp, so3_exp_many, so3_log

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_STEP = 0.1

# error-state blocks
PHI, POS, VEL, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    acc: np.ndarray


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities.

    The defaults are placeholders for a consumer-grade MEMS unit, not
    values tied to any particular sensor.
    """

    sigma_g: float = 1e-3
    sigma_a: float = 1e-2
    sigma_bg: float = 1e-5
    sigma_ba: float = 1e-4
    g: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))


@dataclass(frozen=True)
class ImuBias:
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "ba", np.asarray(self.ba, dtype=float))
        object.__setattr__(self, "bg", np.asarray(self.bg, dtype=float))

    def __sub__(self, other: "ImuBias") -> "ImuBias":
        return ImuBias(self.ba - other.ba, self.bg - other.bg)


@dataclass
class RobotState:
    """Full navigation state; ``R`` maps body vectors into the world frame."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    P: np.ndarray = field(default_factory=lambda: np.zeros(3))
    V: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: ImuBias = field(default_factory=ImuBias)

    @property
    def phi(self) -> np.ndarray:
        return so3_log(self.R)

    def copy(self) -> "RobotState":
        return RobotState(self.R.copy(), self.P.copy(), self.V.copy(),
                          ImuBias(self.bias.ba.copy(), self.bias.bg.copy()))

    def boxplus(self, delta: np.ndarray) -> "RobotState":
        """Apply a 15-vector increment in the error-state convention."""
        return RobotState(
            self.R @ so3_exp(delta[PHI]),
            self.P + delta[POS],
            self.V + delta[VEL],
            ImuBias(self.bias.ba + delta[BA], self.bias.bg + delta[BG]),
        )


@dataclass
class ImuData:
    """A time-ordered IMU stream stored column-wise."""

    t: np.ndarray
    gyro: np.ndarray
    acc: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.acc = np.asarray(self.acc, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.acc)):
            raise ValueError("IMU columns have different lengths")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.acc))):
            raise ValueError("non-finite IMU reading")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuData":
        return cls([s.t for s in samples], [s.gyro for s in samples], [s.acc for s in samples])

    def __len__(self) -> int:
        return len(self.t)

    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), g.copy(), a.copy()) for t, g, a in zip(self.t, self.gyro, self.acc)]

    def rate(self) -> float:
        if len(self.t) < 2:
            return 0.0
        return float((len(self.t) - 1) / (self.t[-1] - self.t[0]))

    def window(self, t0: float, t1: float) -> "ImuData":
        """Samples covering [t0, t1]; endpoints are linearly interpolated.

        Raises ValueError if the stream does not cover the interval.
        """
        if len(self.t) < 2 or t0 < self.t[0] - 1e-9 or t1 > self.t[-1] + 1e-9 or t1 <= t0:
            raise ValueError(f"IMU stream does not cover [{t0}, {t1}]")
        inner = (self.t > t0) & (self.t < t1)
        ts = np.concatenate([[t0], self.t[inner], [t1]])
        gyro = np.column_stack([np.interp(ts, self.t, self.gyro[:, i]) for i in range(3)])
        acc = np.column_stack([np.interp(ts, self.t, self.acc[:, i]) for i in range(3)])
        # drop interpolated endpoints that coincide with a real sample
        keep = np.concatenate([[True], np.diff(ts) > 1e-12])
        return ImuData(ts[keep], gyro[keep], acc[keep])


def _as_data(samples) -> ImuData:
    if isinstance(samples, ImuData):
        return samples
    return ImuData.from_samples(list(samples))


def midpoint_step(state: RobotState, s_k: ImuSample, s_k1: ImuSample, bias: ImuBias,
                  g: np.ndarray = GRAVITY) -> RobotState:
    """Propagate a world-frame state across one IMU interval.

    Rotation is integrated first so the second accelerometer sample is
    rotated with the freshly propagated attitude.
    """
    dt = s_k1.t - s_k.t
    if dt <= 0:
        raise ValueError("IMU timestamps must be strictly increasing")
    if dt > MAX_STEP:
        raise ValueError(f"IMU step {dt:.3f}s exceeds {MAX_STEP}s")
    w_bar = 0.5 * ((s_k.gyro - bias.bg) + (s_k1.gyro - bias.bg))
    R1 = state.R @ so3_exp(w_bar * dt)
    a_bar = 0.5 * (state.R @ (s_k.acc - bias.ba) + R1 @ (s_k1.acc - bias.ba)) + g
    P1 = state.P + state.V * dt + 0.5 * a_bar * dt**2
    V1 = state.V + a_bar * dt
    return RobotState(R1, P1, V1, bias)


@dataclass
class PreintegratedImu:
    dR: np.ndarray
    dP: np.ndarray
    dV: np.ndarray
    dt: float
    cov: np.ndarray
    jac: np.ndarray  # d(dphi, dP, dV) / d(bias), full 15x15 transition product
    bias: ImuBias
    # per-sample intermediate deltas, used for deskewing
    times: np.ndarray
    dRs: np.ndarray
    dPs: np.ndarray
    dVs: np.ndarray

    @property
    def dphi(self) -> np.ndarray:
        return so3_log(self.dR)

    @property
    def J_R_bg(self) -> np.ndarray:
        return self.jac[PHI, BG]

    @property
    def J_P_ba(self) -> np.ndarray:
        return self.jac[POS, BA]

    @property
    def J_P_bg(self) -> np.ndarray:
        return self.jac[POS, BG]

    @property
    def J_V_ba(self) -> np.ndarray:
        return self.jac[VEL, BA]

    @property
    def J_V_bg(self) -> np.ndarray:
        return self.jac[VEL, BG]

    def predict(self, state: RobotState, g: np.ndarray = GRAVITY) -> RobotState:
        """State at the end of the window given the state at its start."""
        dR, dP, dV = correct_bias(self, state.bias)
        T = self.dt
        return RobotState(
            state.R @ dR,
            state.P + state.V * T + 0.5 * g * T**2 + state.R @ dP,
            state.V + g * T + state.R @ dV,
            state.bias,
        )

    def pose_at(self, state: RobotState, t: float, g: np.ndarray = GRAVITY) -> tuple[np.ndarray, np.ndarray]:
        """World pose at time ``t`` inside the window, interpolating cached deltas."""
        ts = self.times
        t = float(np.clip(t, ts[0], ts[-1]))
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        h = ts[k + 1] - ts[k]
        s = t - ts[k]
        dR = self.dRs[k] @ so3_exp((s / h) * so3_log(self.dRs[k].T @ self.dRs[k + 1]))
        # constant mean acceleration within a step, as in the integrator
        a_bar = (self.dVs[k + 1] - self.dVs[k]) / h
        dP = self.dPs[k] + self.dVs[k] * s + 0.5 * a_bar * s * s
        tau = t - ts[0]
        R = state.R @ dR
        P = state.P + state.V * tau + 0.5 * g * tau**2 + state.R @ dP
        return R, P


    def poses_at(self, state: RobotState, t: np.ndarray, g: np.ndarray = GRAVITY) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``pose_at`` over an array of times: ((n, 3, 3), (n, 3))."""
        ts = self.times
        t = np.clip(np.asarray(t, dtype=float).reshape(-1), ts[0], ts[-1])
        k = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
        h = ts[k + 1] - ts[k]
        s = t - ts[k]
        dRs = np.asarray(self.dRs)
        dPs = np.asarray(self.dPs)
        dVs = np.asarray(self.dVs)
        steps = np.stack([so3_log(dRs[i].T @ dRs[i + 1]) for i in range(len(ts) - 1)])
        dR = dRs[k] @ so3_exp_many((s / h)[:, None] * steps[k])
        a_bar = (dVs[k + 1] - dVs[k]) / h[:, None]
        dP = dPs[k] + dVs[k] * s[:, None] + 0.5 * a_bar * (s * s)[:, None]
        tau = (t - ts[0])[:, None]
        R = state.R @ dR
        P = state.P + state.V * tau + 0.5 * g * tau**2 + dP @ state.R.T
        return R, P


def preintegrate(samples, bias: ImuBias, noise: ImuNoiseParams) -> PreintegratedImu:
    """Mid-point preintegration of ``samples`` in the body frame of the first sample.

    Covariance is propagated exactly for per-sample white noise: each
    sample's noise is shared by the two intervals that touch it, so the
    current sample's noise is carried as an augmented state.
    """
    data = _as_data(samples)
    n = len(data)
    if n < 2:
        raise ValueError("preintegration needs at least two IMU samples")

    dR = np.eye(3)
    dP = np.zeros(3)
    dV = np.zeros(3)
    jac = np.eye(15)
    # augmented covariance: 15 error states + current sample's gyro/accel noise
    cov = np.zeros((21, 21))
    dt0 = data.t[1] - data.t[0]
    cov[15:18, 15:18] = np.eye(3) * noise.sigma_g**2 / dt0
    cov[18:21, 18:21] = np.eye(3) * noise.sigma_a**2 / dt0

    dRs = np.empty((n, 3, 3))
    dPs = np.empty((n, 3))
    dVs = np.empty((n, 3))
    dRs[0], dPs[0], dVs[0] = dR, dP, dV
    I3 = np.eye(3)

    for k in range(n - 1):
        dt = data.t[k + 1] - data.t[k]
        if dt > MAX_STEP:
            raise ValueError(f"IMU gap of {dt:.3f}s inside preintegration window")
        u0 = data.acc[k] - bias.ba
        u1 = data.acc[k + 1] - bias.ba
        w_bar = 0.5 * (data.gyro[k] + data.gyro[k + 1]) - bias.bg
        step = so3_exp(w_bar * dt)
        R0 = dR
        R1 = dR @ step
        a_bar = 0.5 * (R0 @ u0 + R1 @ u1)

        A = step.T
        B = right_jacobian(w_bar * dt) * dt
        C0 = -0.5 * R0 @ skew(u0)
        C1 = -0.5 * R1 @ skew(u1)
        Ma_th = C0 + C1 @ A
        Ma_bg = -C1 @ B
        Ma_ng = 0.5 * C1 @ B
        Ma_ba = -0.5 * (R0 + R1)
        h = 0.5 * dt * dt

        F = np.eye(15)
        F[PHI, PHI] = A
        F[PHI, BG] = -B
        F[POS, PHI] = h * Ma_th
        F[POS, VEL] = dt * I3
        F[POS, BA] = h * Ma_ba
        F[POS, BG] = h * Ma_bg
        F[VEL, PHI] = dt * Ma_th
        F[VEL, BA] = dt * Ma_ba
        F[VEL, BG] = dt * Ma_bg

        # transition of the augmented state; the old sample-noise slot is replaced
        M = np.zeros((21, 21))
        M[:15, :15] = F
        M[PHI, 15:18] = 0.5 * B
        M[POS, 15:18] = h * Ma_ng
        M[VEL, 15:18] = dt * Ma_ng
        M[POS, 18:21] = h * 0.5 * R0
        M[VEL, 18:21] = dt * 0.5 * R0
        # new noise: [n_g(k+1), n_a(k+1), w_ba, w_bg]
        G = np.zeros((21, 12))
        G[PHI, 0:3] = 0.5 * B
        G[POS, 0:3] = h * Ma_ng
        G[VEL, 0:3] = dt * Ma_ng
        G[POS, 3:6] = h * 0.5 * R1
        G[VEL, 3:6] = dt * 0.5 * R1
        G[15:18, 0:3] = I3
        G[18:21, 3:6] = I3
        G[BA, 6:9] = I3
        G[BG, 9:12] = I3
        Q = np.diag(np.concatenate([
            np.full(3, noise.sigma_g**2 / dt),
            np.full(3, noise.sigma_a**2 / dt),
            np.full(3, noise.sigma_ba**2 * dt),
            np.full(3, noise.sigma_bg**2 * dt),
        ]))
        cov = M @ cov @ M.T + G @ Q @ G.T
        jac = F @ jac

        dP = dP + dV * dt + h * a_bar
        dV = dV + a_bar * dt
        dR = R1
        dRs[k + 1], dPs[k + 1], dVs[k + 1] = dR, dP, dV

    cov15 = 0.5 * (cov[:15, :15] + cov[:15, :15].T)
    return PreintegratedImu(dR, dP, dV, float(data.t[-1] - data.t[0]), cov15, jac, bias,
                            data.t.copy(), dRs, dPs, dVs)


def correct_bias(pre: PreintegratedImu, new_bias: ImuBias) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-order bias update of the preintegrated deltas (dR, dP, dV)."""
    db = new_bias - pre.bias
    size = max(np.abs(db.ba).max(), np.abs(db.bg).max())
    if size > 0.1:
        log.debug("bias change %.3g is large for first-order correction", size)
    dR = pre.dR @ so3_exp(pre.J_R_bg @ db.bg)
    dP = pre.dP + pre.J_P_ba @ db.ba + pre.J_P_bg @ db.bg
    dV = pre.dV + pre.J_V_ba @ db.ba + pre.J_V_bg @ db.bg
    return dR, dP, dV


def imu_residual(si: RobotState, sj: RobotState, pre: PreintegratedImu,
                 g: np.ndarray = GRAVITY) -> np.ndarray:
    dR, dP, dV = correct_bias(pre, si.bias)
    T = pre.dt
    Ri_t = si.R.T
    r = np.empty(15)
    r[PHI] = so3_log(dR.T @ Ri_t @ sj.R)
    r[POS] = Ri_t @ (sj.P - si.P - si.V * T - 0.5 * g * T**2) - dP
    r[VEL] = Ri_t @ (sj.V - si.V - g * T) - dV
    r[BA] = sj.bias.ba - si.bias.ba
    r[BG] = sj.bias.bg - si.bias.bg
    return r


def imu_jacobian(si: RobotState, sj: RobotState, pre: PreintegratedImu,
                 g: np.ndarray = GRAVITY) -> np.ndarray:
    """15x30 Jacobian of ``imu_residual`` w.r.t. [error state i, error state j]."""
    dR, _, _ = correct_bias(pre, si.bias)
    T = pre.dt
    Ri_t = si.R.T
    E = dR.T @ Ri_t @ sj.R
    r_phi = so3_log(E)
    Jr_inv = right_jacobian_inv(r_phi)
    dbg = si.bias.bg - pre.bias.bg

    J = np.zeros((15, 30))
    j = 15  # column offset of state j
    J[PHI, 0:3] = -Jr_inv @ sj.R.T @ si.R
    J[PHI, 12:15] = -Jr_inv @ E.T @ right_jacobian(pre.J_R_bg @ dbg) @ pre.J_R_bg
    J[PHI, j:j + 3] = Jr_inv

    J[POS, 0:3] = skew(Ri_t @ (sj.P - si.P - si.V * T - 0.5 * g * T**2))
    J[POS, 3:6] = -Ri_t
    J[POS, 6:9] = -Ri_t * T
    J[POS, 9:12] = -pre.J_P_ba
    J[POS, 12:15] = -pre.J_P_bg
    J[POS, j + 3:j + 6] = Ri_t

    J[VEL, 0:3] = skew(Ri_t @ (sj.V - si.V - g * T))
    J[VEL, 6:9] = -Ri_t
    J[VEL, 9:12] = -pre.J_V_ba
    J[VEL, 12:15] = -pre.J_V_bg
    J[VEL, j + 6:j + 9] = Ri_t

    I3 = np.eye(3)
    J[BA, 9:12] = -I3
    J[BA, j + 9:j + 12] = I3
    J[BG, 12:15] = -I3
    J[BG, j + 12:j + 15] = I3
    return J
