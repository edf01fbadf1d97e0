"""Planar-pose MAP estimation with out-of-plane perturbation noise.

LiDAR residuals act on (d_x, d_y, yaw) of the current frame. Roll, pitch
and height disturbances of a ground vehicle are not estimated by the
LiDAR terms; they are folded into each residual's variance through the
first-order sensitivity of that residual to them. With an IMU factor the
full 15-dim states of the previous and current frame are optimised jointly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureScan
from .imu import GRAVITY, PHI, PreintegratedImu, RobotState, imu_jacobian, imu_residual
from .lie import right_jacobian_inv, se2_lift, skew, so3_log, wrap_angle, yaw_of
from .map import FeatureMap

log = logging.getLogger(__name__)

E3 = np.array([0.0, 0.0, 1.0])
KINK = 1e-9
# |cos| between a fitted plane and a flat neighbour voxel (about 25 degrees)
NORMAL_AGREEMENT = 0.9


@dataclass
class Se2Pose:
    yaw: float = 0.0
    d: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.yaw = wrap_angle(float(self.yaw))
        self.d = np.asarray(self.d, dtype=float).reshape(2)

    def lift(self) -> tuple[np.ndarray, np.ndarray]:
        return se2_lift(self.yaw, self.d)

    @classmethod
    def from_state(cls, state: RobotState) -> "Se2Pose":
        return cls(yaw_of(state.R), state.P[:2])


@dataclass(frozen=True)
class PerturbationModel:
    """Variances of height (m^2), roll/pitch (2x2, rad^2) and range noise (m^2)."""

    sigma_z2: float = 0.05**2
    cov_theta: np.ndarray = field(default_factory=lambda: 1e-3 * np.eye(2))
    sigma_k2: float = 0.05**2

    def __post_init__(self):
        cov = np.asarray(self.cov_theta, dtype=float).reshape(2, 2)
        object.__setattr__(self, "cov_theta", cov)
        if self.sigma_z2 < 0 or self.sigma_k2 < 0:
            raise ValueError("variances must be non-negative")
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-15:
            raise ValueError("roll/pitch covariance must be symmetric PSD")

    @classmethod
    def zero(cls, sigma_k2: float = 0.05**2) -> "PerturbationModel":
        return cls(0.0, np.zeros((2, 2)), sigma_k2)


@dataclass
class EdgeCorrespondence:
    p: np.ndarray
    pa: np.ndarray
    pb: np.ndarray

    def __post_init__(self):
        if np.linalg.norm(np.asarray(self.pa) - np.asarray(self.pb)) <= 1e-6:
            raise ValueError("degenerate edge correspondence")


@dataclass
class PlaneCorrespondence:
    p: np.ndarray
    pa: np.ndarray
    pb: np.ndarray
    pc: np.ndarray

    def __post_init__(self):
        pa, pb, pc = map(np.asarray, (self.pa, self.pb, self.pc))
        if np.linalg.norm(np.cross(pa - pb, pc - pa)) <= 1e-6:
            raise ValueError("degenerate plane correspondence")


@dataclass
class FactorBlock:
    """Dense residual block with its Jacobian over the 30-dim two-state vector and information matrix."""

    residual: np.ndarray
    jacobian: np.ndarray
    weight: np.ndarray


# -- single-correspondence operations -------------------------------------------------

def transform_point(pose: Se2Pose, p: np.ndarray) -> np.ndarray:
    R, P = pose.lift()
    return R @ np.asarray(p, dtype=float) + P


def edge_residual(c: EdgeCorrespondence, pose: Se2Pose) -> float:
    q = transform_point(pose, c.p)
    return float(np.linalg.norm(np.cross(q - c.pb, q - c.pa)) / np.linalg.norm(c.pa - c.pb))


def plane_residual(c: PlaneCorrespondence, pose: Se2Pose) -> float:
    q = transform_point(pose, c.p)
    n = np.cross(c.pa - c.pb, c.pc - c.pa)
    return float(abs((q - c.pa) @ n) / np.linalg.norm(n))


def pose_point_jacobian(pose: Se2Pose, p: np.ndarray) -> np.ndarray:
    """d(T p) / d(d_x, d_y, yaw) under a right yaw perturbation."""
    R, _ = pose.lift()
    J = np.zeros((3, 3))
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    J[:, 2] = -R @ skew(np.asarray(p, dtype=float)) @ E3
    return J


def _edge_gradient(q, pa, pb):
    c = np.cross(q - pb, q - pa)
    nc = np.linalg.norm(c)
    if nc < KINK:
        return np.zeros(3)
    ab = pa - pb
    return (c / nc) @ skew(ab) / np.linalg.norm(ab)


def _plane_gradient(q, pa, pb, pc):
    n = np.cross(pa - pb, pc - pa)
    n = n / np.linalg.norm(n)
    s = (q - pa) @ n
    if abs(s) < KINK:
        return np.zeros(3)
    return np.sign(s) * n


def _gradient(c, pose: Se2Pose) -> np.ndarray:
    q = transform_point(pose, c.p)
    if isinstance(c, EdgeCorrespondence):
        return _edge_gradient(q, c.pa, c.pb)
    return _plane_gradient(q, c.pa, c.pb, c.pc)


def edge_jacobian(c: EdgeCorrespondence, pose: Se2Pose) -> np.ndarray:
    return _gradient(c, pose) @ pose_point_jacobian(pose, c.p)


def plane_jacobian(c: PlaneCorrespondence, pose: Se2Pose) -> np.ndarray:
    return _gradient(c, pose) @ pose_point_jacobian(pose, c.p)


def perturbation_jacobians(c, pose: Se2Pose, kind: str | None = None) -> tuple[np.ndarray, float]:
    """Sensitivity of the residual to a body-frame tilt and a vertical offset.

    Returns (J_theta, J_z): J_theta is 1x3 over a rotation perturbation
    applied on the right of the pose, J_z the derivative along world z.
    """
    if kind is not None and kind not in ("edge", "plane"):
        raise ValueError(f"unknown correspondence kind {kind!r}")
    g = _gradient(c, pose)
    R, _ = pose.lift()
    J_theta = g @ (-R @ skew(np.asarray(c.p, dtype=float)))
    return J_theta, float(g @ E3)


def lidar_noise_variance(J_theta: np.ndarray, J_z: float, model: PerturbationModel) -> float:
    a = np.asarray(J_theta, dtype=float)[:2]
    var = float(a @ model.cov_theta @ a + model.sigma_z2 * J_z**2 + model.sigma_k2)
    assert var >= model.sigma_k2
    return var


# -- vectorised assembly --------------------------------------------------------------

def _batch_edge(q, pa, pb):
    """Perpendicular offset from each line as two rows, f1 = |offset| and f2 = 0.

    The rows run along orthonormal directions perpendicular to the line; their
    squares sum to the squared point-to-edge residual, and unlike the distance
    itself they stay differentiable on the line. Returns (f, g) with 2n rows,
    the two rows of correspondence i at 2i and 2i + 1.
    """
    d = pb - pa
    d /= np.linalg.norm(d, axis=1)[:, None]
    off = q - pa
    off -= np.einsum("ij,ij->i", off, d)[:, None] * d
    f = np.linalg.norm(off, axis=1)
    # on the line any perpendicular will do; take the axis least aligned with d
    axis = np.eye(3)[np.abs(d).argmin(axis=1)]
    fallback = np.cross(d, axis)
    u1 = np.where((f < KINK)[:, None], fallback, off)
    u1 /= np.linalg.norm(u1, axis=1)[:, None]
    u2 = np.cross(d, u1)
    g = np.stack([u1, u2], axis=1).reshape(-1, 3)
    return np.stack([np.where(f < KINK, 0.0, f), np.zeros(len(f))], axis=1).reshape(-1), g


def _batch_plane(q, pa, pb, pc):
    """Signed distances and their gradients (the unit normals).

    The square equals the squared point-to-plane residual, but unlike the
    absolute value the signed form stays differentiable on the plane.
    """
    n = np.cross(pa - pb, pc - pa)
    n /= np.linalg.norm(n, axis=1)[:, None]
    return np.einsum("ij,ij->i", q - pa, n), n


def _centred_svd(nb):
    c = nb - nb.mean(axis=1, keepdims=True)
    _, sv, vt = np.linalg.svd(c)
    return c, sv, vt


def _edge_support(nb, tol):
    """Accept neighbourhoods that form a line through the query; return (ok, pa, pb).

    All neighbours must lie within ``tol`` of the fitted line. pa, pb are
    the extreme neighbours along it.
    """
    c, sv, vt = _centred_svd(nb)
    u = vt[:, 0]
    along = np.einsum("mkj,mj->mk", c, u)
    off = np.linalg.norm(c - along[..., None] * u[:, None, :], axis=2)
    ok = (off.max(axis=1) < tol) & (sv[:, 0] > 3.0 * sv[:, 1])
    rows = np.arange(len(nb))
    return ok, nb[rows, along.argmin(axis=1)], nb[rows, along.argmax(axis=1)]


def _plane_support(nb, tol, nb_normals=None, nb_flat=None):
    """Accept neighbourhoods that form a plane; return (ok, pa, pb, pc).

    All neighbours must lie within ``tol`` of the fitted plane, and any
    neighbour whose own voxel is flat must agree with its orientation,
    which rejects planes fitted across a corner between two surfaces.
    pa is the nearest neighbour, pb and pc the pair spanning the largest
    triangle with it.
    """
    c, sv, vt = _centred_svd(nb)
    normal = vt[:, 2]
    off = np.abs(np.einsum("mkj,mj->mk", c, normal))
    ok = (off.max(axis=1) < tol) & (sv[:, 1] > 0.1 * sv[:, 0])
    if nb_normals is not None:
        cos = np.abs(np.einsum("mkj,mj->mk", nb_normals, normal))
        ok &= ~np.any(nb_flat & (cos < NORMAL_AGREEMENT), axis=1)
    k = nb.shape[1]
    pairs = np.array([(i, j) for i in range(1, k) for j in range(i + 1, k)])
    area = np.linalg.norm(np.cross(nb[:, pairs[:, 0]] - nb[:, :1], nb[:, pairs[:, 1]] - nb[:, :1]), axis=2)
    best = pairs[area.argmax(axis=1)]
    rows = np.arange(len(nb))
    return ok, nb[:, 0], nb[rows, best[:, 0]], nb[rows, best[:, 1]]


@dataclass
class LidarTerms:
    f: np.ndarray        # residual rows: two per edge, then one signed distance per plane
    J: np.ndarray        # (rows, 3) over (d_x, d_y, yaw)
    var: np.ndarray      # per-row variance
    n_edge: int
    n_plane: int

    @property
    def count(self) -> int:
        return self.n_edge + self.n_plane


def lidar_terms(pose: Se2Pose, features: FeatureScan, fmap: FeatureMap, model: PerturbationModel,
                max_dist: float, fit_k: int = 5, fit_tol: float = 0.05) -> LidarTerms:
    """Search correspondences for the current pose and linearise every residual.

    Each match looks at ``fit_k`` map neighbours within ``max_dist`` and is
    kept only if they lie within ``fit_tol`` of a common line (edges) or
    plane (planars); the residual then uses two or three of them.
    """
    R, P = pose.lift()
    fs, gs, ps = [], [], []
    n_edge = n_plane = 0

    pts = features.edges.points
    if len(pts) and len(fmap.edge):
        q = pts @ R.T + P
        nb, _, ok = fmap.nearest_k(q, max(fit_k, 2), "edge", max_dist)
        ok = ok.all(axis=1)
        good, pa, pb = _edge_support(nb, fit_tol)
        ok &= good & (np.linalg.norm(pa - pb, axis=1) > 1e-6)
        if ok.any():
            f, g = _batch_edge(q[ok], pa[ok], pb[ok])
            fs.append(f), gs.append(g), ps.append(np.repeat(pts[ok], 2, axis=0))
            n_edge = int(ok.sum())

    pts = features.planars.points
    if len(pts) and len(fmap.plane):
        q = pts @ R.T + P
        nb, _, ok, idx = fmap.nearest_k(q, max(fit_k, 3), "plane", max_dist, return_index=True)
        ok = ok.all(axis=1)
        normals, flat = fmap.plane.normals()
        idx = np.maximum(idx, 0)
        good, pa, pb, pc = _plane_support(nb, fit_tol, normals[idx], flat[idx] & ok[:, None])
        cross = np.cross(pa - pb, pc - pa)
        ok &= good & (np.linalg.norm(cross, axis=1) > 1e-6)
        if ok.any():
            f, g = _batch_plane(q[ok], pa[ok], pb[ok], pc[ok])
            fs.append(f), gs.append(g), ps.append(pts[ok])
            n_plane = int(ok.sum())

    if not fs:
        z = np.zeros(0)
        return LidarTerms(z, np.zeros((0, 3)), z, 0, 0)
    f = np.concatenate(fs)
    g = np.concatenate(gs)
    p = np.concatenate(ps)
    # tilt sensitivity: g . R (eta x p) for eta = e1, e2
    Jt = np.column_stack([
        np.einsum("ij,ij->i", g, np.column_stack([np.zeros(len(p)), -p[:, 2], p[:, 1]]) @ R.T),
        np.einsum("ij,ij->i", g, np.column_stack([p[:, 2], np.zeros(len(p)), -p[:, 0]]) @ R.T),
    ])
    var_pert = np.einsum("ni,ij,nj->n", Jt, model.cov_theta, Jt) + model.sigma_z2 * g[:, 2] ** 2
    # -R [p]^ e3 = R (e3 x p)
    Rp_perp = np.column_stack([-p[:, 1], p[:, 0], np.zeros(len(p))]) @ R.T
    J = np.column_stack([g[:, 0], g[:, 1], np.einsum("ij,ij->i", g, Rp_perp)])
    var = var_pert + model.sigma_k2
    return LidarTerms(f, J, var, n_edge, n_plane)


# -- Gauss-Newton ---------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 30
    tolerance: float = 1e-4
    min_correspondences: int = 10
    max_dist: float = 1.0
    # map neighbours used to validate a correspondence, and their fit tolerance (m)
    fit_neighbours: int = 5
    fit_tol: float = 0.05
    huber_delta: float | None = None
    condition_limit: float = 1e12
    damping: float = 1e-6
    # floor on the soft roll/pitch/height prior of the current state (rad^2, m^2)
    min_prior_var: float = 1e-6


@dataclass
class ImuFactor:
    """Preintegrated motion from ``state_i`` plus the prior on ``state_i``."""

    pre: PreintegratedImu
    state_i: RobotState
    cov_i: np.ndarray
    g: np.ndarray = field(default_factory=lambda: GRAVITY.copy())


@dataclass
class EstimateResult:
    state: RobotState
    converged: bool
    iterations: int
    n_edge: int = 0
    n_plane: int = 0
    state_i: RobotState | None = None
    cov: np.ndarray | None = None
    costs: list = field(default_factory=list)


def _robust_weights(f: np.ndarray, w: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is None:
        return w
    a = np.abs(f)
    return np.where(a <= delta, w, w * delta / np.maximum(a, 1e-300))


def _solve(H: np.ndarray, b: np.ndarray, config: SolverConfig) -> np.ndarray:
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > config.condition_limit:
        log.info("normal matrix ill-conditioned (cond %.2e); damping", cond)
        H = H + config.damping * np.eye(len(H))
    return np.linalg.solve(H, b)


def _state_prior(state: RobotState, mean: RobotState) -> tuple[np.ndarray, np.ndarray]:
    r = np.concatenate([
        so3_log(mean.R.T @ state.R), state.P - mean.P, state.V - mean.V,
        state.bias.ba - mean.bias.ba, state.bias.bg - mean.bias.bg,
    ])
    J = np.eye(15)
    J[PHI, PHI] = right_jacobian_inv(r[PHI])
    return r, J


def _yaw_gradient(R: np.ndarray) -> np.ndarray:
    """d yaw(R exp(delta)) / d delta."""
    c, s = R[0, 0], R[1, 0]
    n2 = c * c + s * s
    # d R[:, 0] = R [delta]^ e1 = -R [e1]^ delta
    dcol = -R @ skew(np.array([1.0, 0.0, 0.0]))
    return (c * dcol[1] - s * dcol[0]) / n2


def _planar_prior(state: RobotState, model: PerturbationModel, config: SolverConfig):
    """Soft pull of the body's roll/pitch and height toward the ground plane."""
    up = state.R.T @ E3
    r = np.array([up[0], up[1], state.P[2]])
    J = np.zeros((3, 15))
    J[0:2, PHI] = skew(up)[0:2]
    J[2, 5] = 1.0
    cov_t = model.cov_theta + config.min_prior_var * np.eye(2)
    info = np.zeros((3, 3))
    info[:2, :2] = np.linalg.inv(cov_t)
    info[2, 2] = 1.0 / max(model.sigma_z2, config.min_prior_var)
    return r, J, info


def _lidar_cost(terms: LidarTerms, config: SolverConfig) -> float:
    w = _robust_weights(terms.f, 1.0 / terms.var, config.huber_delta)
    return float(np.einsum("i,i,i->", w, terms.f, terms.f))


def estimate(features: FeatureScan, fmap: FeatureMap, imu_factor: ImuFactor | None,
             prior_state: RobotState, model: PerturbationModel,
             config: SolverConfig = SolverConfig()) -> EstimateResult:
    """Gauss-Newton over the current frame (and previous frame when an IMU factor is given).

    ``prior_state`` is the initial guess for the current frame.
    Correspondences are searched again at every iteration.
    """
    if imu_factor is None:
        return _estimate_planar(features, fmap, prior_state, model, config)
    return _estimate_inertial(features, fmap, imu_factor, prior_state, model, config)


def _estimate_planar(features, fmap, prior_state, model, config) -> EstimateResult:
    pose = Se2Pose.from_state(prior_state)
    costs = []
    converged = False
    n_edge = n_plane = 0
    it = 0
    H = None
    for it in range(1, config.max_iterations + 1):
        terms = lidar_terms(pose, features, fmap, model, config.max_dist, config.fit_neighbours, config.fit_tol)
        n_edge, n_plane = terms.n_edge, terms.n_plane
        if terms.count < config.min_correspondences:
            log.warning("degenerate frame: %d correspondences", terms.count)
            return EstimateResult(prior_state.copy(), False, it, n_edge, n_plane)
        w = _robust_weights(terms.f, 1.0 / terms.var, config.huber_delta)
        costs.append(_lidar_cost(terms, config))
        H = np.einsum("ni,n,nj->ij", terms.J, w, terms.J)
        b = -np.einsum("ni,n,n->i", terms.J, w, terms.f)
        delta = _solve(H, b, config)
        pose = Se2Pose(pose.yaw + delta[2], pose.d + delta[:2])
        if np.linalg.norm(delta) < config.tolerance:
            converged = True
            break
    R, P = pose.lift()
    state = RobotState(R, P, prior_state.V.copy(), prior_state.bias)
    cov = np.linalg.inv(H) if H is not None else None
    return EstimateResult(state, converged, it, n_edge, n_plane, cov=cov, costs=costs)


def _estimate_inertial(features, fmap, factor: ImuFactor, prior_state, model, config) -> EstimateResult:
    si = factor.state_i.copy()
    sj = prior_state.copy()
    info_i = np.linalg.inv(factor.cov_i)
    info_imu = np.linalg.inv(factor.pre.cov + 1e-12 * np.eye(15))
    costs = []
    converged = False
    n_edge = n_plane = 0
    H = None
    it = 0
    for it in range(1, config.max_iterations + 1):
        blocks = []
        r, J = _state_prior(si, factor.state_i)
        blocks.append(FactorBlock(r, np.hstack([J, np.zeros((15, 15))]), info_i))
        blocks.append(FactorBlock(imu_residual(si, sj, factor.pre, factor.g),
                                  imu_jacobian(si, sj, factor.pre, factor.g), info_imu))
        r, J, info = _planar_prior(sj, model, config)
        blocks.append(FactorBlock(r, np.hstack([np.zeros((3, 15)), J]), info))
        H = np.zeros((30, 30))
        b = np.zeros(30)
        cost = 0.0
        for blk in blocks:
            JtW = blk.jacobian.T @ blk.weight
            H += JtW @ blk.jacobian
            b -= JtW @ blk.residual
            cost += float(blk.residual @ blk.weight @ blk.residual)

        pose = Se2Pose.from_state(sj)
        terms = lidar_terms(pose, features, fmap, model, config.max_dist, config.fit_neighbours, config.fit_tol)
        n_edge, n_plane = terms.n_edge, terms.n_plane
        if terms.count < config.min_correspondences:
            log.warning("degenerate frame: %d correspondences", terms.count)
            return EstimateResult(prior_state.copy(), False, it, n_edge, n_plane,
                                  state_i=factor.state_i.copy())
        w = _robust_weights(terms.f, 1.0 / terms.var, config.huber_delta)
        # map (d_x, d_y, yaw) onto [dP_j x, dP_j y] and the rotation of state j
        JL = np.zeros((len(terms.f), 30))
        JL[:, 18] = terms.J[:, 0]
        JL[:, 19] = terms.J[:, 1]
        JL[:, 15:18] = np.outer(terms.J[:, 2], _yaw_gradient(sj.R))
        H += np.einsum("ni,n,nj->ij", JL, w, JL)
        b -= np.einsum("ni,n,n->i", JL, w, terms.f)
        cost += _lidar_cost(terms, config)
        costs.append(cost)

        delta = _solve(H, b, config)
        si = si.boxplus(delta[:15])
        sj = sj.boxplus(delta[15:])
        if np.linalg.norm(delta) < config.tolerance:
            converged = True
            break
    cov = None
    if H is not None:
        full = np.linalg.inv(H)
        cov = 0.5 * (full[15:, 15:] + full[15:, 15:].T)
    return EstimateResult(sj, converged, it, n_edge, n_plane, state_i=si, cov=cov, costs=costs)


def objective(features, fmap, pose: Se2Pose, model: PerturbationModel, config: SolverConfig = SolverConfig()) -> float:
    """Weighted LiDAR cost at ``pose`` with freshly searched correspondences."""
    return _lidar_cost(lidar_terms(pose, features, fmap, model, config.max_dist, config.fit_neighbours, config.fit_tol), config)


__all__ = [
    "Se2Pose", "PerturbationModel", "EdgeCorrespondence", "PlaneCorrespondence", "FactorBlock",
    "transform_point", "edge_residual", "plane_residual", "pose_point_jacobian", "edge_jacobian",
    "plane_jacobian", "perturbation_jacobians", "lidar_noise_variance", "lidar_terms", "LidarTerms",
    "SolverConfig", "ImuFactor", "EstimateResult", "estimate", "objective",
]

