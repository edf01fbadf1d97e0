"""Absolute trajectory and rotation error against ground truth."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Trajectory
from .lie import so3_log

log = logging.getLogger(__name__)

MAX_DT = 0.02


class AssociationError(ValueError):
    pass


@dataclass
class Pairs:
    est: np.ndarray      # (n, 4, 4)
    gt: np.ndarray       # (n, 4, 4)
    t: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.t)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = MAX_DT) -> Pairs:
    """Pair every estimated pose with the nearest ground-truth timestamp within ``max_dt``."""
    if len(est) == 0 or len(gt) == 0:
        raise AssociationError("empty trajectory")
    k = np.searchsorted(gt.t, est.t)
    lo = np.clip(k - 1, 0, len(gt) - 1)
    hi = np.clip(k, 0, len(gt) - 1)
    # nearest neighbour; an exact tie goes to the earlier sample
    pick = np.where(np.abs(gt.t[hi] - est.t) < np.abs(gt.t[lo] - est.t), hi, lo)
    ok = np.abs(gt.t[pick] - est.t) <= max_dt
    dropped = int((~ok).sum())
    if not ok.any():
        raise AssociationError(f"no pose pairs within {max_dt} s")
    if dropped:
        log.info("%d estimated poses without ground truth within %.3f s", dropped, max_dt)
    E = est.transforms()[ok]
    G = gt.transforms()[pick[ok]]
    return Pairs(E, G, est.t[ok], dropped)


def pair_errors(pairs: Pairs) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair translation (m) and rotation (deg) of T_gt^-1 T_est."""
    Rg, Pg = pairs.gt[:, :3, :3], pairs.gt[:, :3, 3]
    Re, Pe = pairs.est[:, :3, :3], pairs.est[:, :3, 3]
    dR = np.einsum("nji,njk->nik", Rg, Re)
    dP = np.einsum("nji,nj->ni", Rg, Pe - Pg)
    trans = np.linalg.norm(dP, axis=1)
    rot = np.degrees([np.linalg.norm(so3_log(r)) for r in dR])
    return trans, np.asarray(rot, dtype=float).reshape(-1)


def rmse(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def ate_are(pairs: Pairs) -> tuple[float, float]:
    """(ATE RMSE in metres, ARE RMSE in degrees)."""
    trans, rot = pair_errors(pairs)
    return rmse(trans), rmse(rot)


def umeyama(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rigid transform (no scale) best mapping ``src`` points onto ``dst``."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((dst - md).T @ (src - ms))
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = md - R @ ms
    return T


def align(pairs: Pairs) -> Pairs:
    """Left-multiply the estimate by the rigid transform that best fits its positions to ground truth."""
    T = umeyama(pairs.est[:, :3, 3], pairs.gt[:, :3, 3])
    return Pairs(T @ pairs.est, pairs.gt, pairs.t, pairs.dropped)


@dataclass
class Report:
    ate: float
    are: float
    pairs: int
    dropped: int
    ate_mean: float
    are_mean: float
    ate_max: float
    are_max: float
    aligned: bool = False

    def table(self, name: str = "estimate") -> str:
        head = f"{'method':<14}{'trans.(m)':>12}{'rot.(deg)':>12}{'pairs':>8}"
        row = f"{name:<14}{self.ate:>12.4f}{self.are:>12.4f}{self.pairs:>8d}"
        return head + "\n" + row + "\n"

    def keyvalues(self) -> str:
        keys = ("ate", "are", "pairs", "dropped", "ate_mean", "are_mean", "ate_max", "are_max", "aligned")
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in keys)


def evaluate(est: Trajectory, gt: Trajectory, max_dt: float = MAX_DT, do_align: bool = False) -> Report:
    pairs = associate(est, gt, max_dt)
    if do_align:
        pairs = align(pairs)
    trans, rot = pair_errors(pairs)
    return Report(rmse(trans), rmse(rot), len(pairs), pairs.dropped, float(trans.mean()),
                  float(rot.mean()), float(trans.max()), float(rot.max()), do_align)


def write_report(out_dir, report: Report, name: str = "estimate") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.table(name))
    (out / "metrics.kv").write_text(report.keyvalues())


def write_xy_csv(path, trajectories: dict[str, Trajectory]) -> None:
    """Top-down x,y track per method, for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "t", "x", "y"])
        for name, tr in trajectories.items():
            for t, p in zip(tr.t, tr.P):
                w.writerow([name, repr(float(t)), repr(float(p[0])), repr(float(p[1]))])
