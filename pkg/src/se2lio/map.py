"""Voxel-downsampled edge/plane maps with exact k-nearest-neighbour queries."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class VoxelCloud:
    """Point set with at most one point per voxel, the centroid of everything inserted there.

    Points keep the index of the voxel's first insertion, which breaks
    distance ties in queries.
    """

    def __init__(self, voxel_size: float, workers: int = 1):
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.workers = workers
        self._slot: dict[tuple[int, int, int], int] = {}
        self._sum = np.zeros((0, 3))
        self._moment = np.zeros((0, 3, 3))
        self._count = np.zeros(0)
        self._alive = np.zeros(0, dtype=bool)
        self._tree = None
        self._points = np.zeros((0, 3))
        self._ids = np.zeros(0, dtype=np.int64)
        self._normals = None

    def __len__(self) -> int:
        return int(self._alive.sum())

    def insert(self, points: np.ndarray) -> int:
        """Add points; returns how many were rejected as non-finite."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        finite = np.all(np.isfinite(points), axis=1)
        rejected = int((~finite).sum())
        if rejected:
            log.debug("dropped %d non-finite map points", rejected)
        points = points[finite]
        if len(points) == 0:
            return rejected
        keys = np.floor(points / self.voxel_size).astype(np.int64)
        # unique voxels in first-occurrence order, so slot ids follow insertion order
        uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        base = len(self._count)
        slots = np.empty(len(uniq), dtype=np.int64)
        fresh = 0
        for u in order:
            key = tuple(uniq[u])
            s = self._slot.get(key)
            if s is None:
                s = base + fresh
                fresh += 1
                self._slot[key] = s
            slots[u] = s
        slot_of = slots[inv.reshape(-1)]
        if fresh:
            self._sum = np.vstack([self._sum, np.zeros((fresh, 3))])
            self._moment = np.concatenate([self._moment, np.zeros((fresh, 3, 3))])
            self._count = np.concatenate([self._count, np.zeros(fresh)])
            self._alive = np.concatenate([self._alive, np.ones(fresh, dtype=bool)])
        # fixed-order accumulation
        np.add.at(self._sum, slot_of, points)
        np.add.at(self._count, slot_of, 1.0)
        # second moments about the voxel corner keep the sums well conditioned
        local = points - keys * self.voxel_size
        np.add.at(self._moment, slot_of, local[:, :, None] * local[:, None, :])
        self._tree = None
        self._normals = None
        return rejected

    def crop(self, center: np.ndarray, radius: float) -> None:
        """Drop voxels whose centroid lies farther than ``radius`` from ``center``."""
        pts = self._sum / np.maximum(self._count, 1.0)[:, None]
        far = np.linalg.norm(pts - center, axis=1) > radius
        if np.any(far & self._alive):
            self._alive &= ~far
            self._slot = {k: s for k, s in self._slot.items() if self._alive[s]}
            self._tree = None
            self._normals = None

    def points(self) -> np.ndarray:
        self._build()
        return self._points

    def _build(self) -> None:
        if self._tree is not None:
            return
        ids = np.flatnonzero(self._alive)
        self._ids = ids
        self._points = self._sum[ids] / self._count[ids, None]
        self._tree = cKDTree(self._points) if len(ids) else None

    def normals(self, flatness: float = 0.1, min_extent: float = 0.1):
        """Per-point surface normals from the scatter of each voxel's raw points.

        Returns (normals, flat) aligned with ``points()``. A voxel counts as flat
        when its points spread at least ``min_extent`` voxel sizes in two
        directions and the spread across them is below ``flatness`` of that.
        """
        self._build()
        if self._normals is None:
            ids = self._ids
            n = self._count[ids]
            corner = np.floor(self._points / self.voxel_size) * self.voxel_size
            mean = self._points - corner
            cov = self._moment[ids] / n[:, None, None] - mean[:, :, None] * mean[:, None, :]
            w, v = np.linalg.eigh(cov) if len(ids) else (np.zeros((0, 3)), np.zeros((0, 3, 3)))
            sd = np.sqrt(np.maximum(w, 0.0))
            flat = (sd[:, 1] > min_extent * self.voxel_size) & (sd[:, 0] < flatness * sd[:, 1]) & (n >= 3)
            self._normals = (v[:, :, 0], flat)
        return self._normals

    def nearest_k(self, queries: np.ndarray, k: int, max_dist: float = np.inf, return_index: bool = False):
        """Exact k-NN for each query row.

        Returns (points, dists, valid) of shapes (m, k, 3), (m, k), (m, k);
        neighbours beyond ``max_dist`` or missing are flagged invalid.
        Ties in distance are ordered by insertion index. With ``return_index``
        a fourth array gives row indices into ``points()``, -1 where invalid.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        m = len(queries)
        self._build()
        pts = np.zeros((m, k, 3))
        dists = np.full((m, k), np.inf)
        valid = np.zeros((m, k), dtype=bool)
        index = np.full((m, k), -1, dtype=np.int64)
        if self._tree is None or m == 0:
            return (pts, dists, valid, index) if return_index else (pts, dists, valid)
        n = len(self._points)
        # one extra neighbour so a tie at the k-th position can be resolved by index
        kk = min(k + 1, n)
        d, idx = self._tree.query(queries, k=kk, distance_upper_bound=max_dist, workers=self.workers)
        d = np.asarray(d).reshape(m, kk)
        idx = np.asarray(idx).reshape(m, kk)
        ok = idx < n
        safe = np.where(ok, idx, 0)
        # exact distances recomputed in a fixed way, then (distance, id) ordering
        cand = self._points[safe]
        d = np.where(ok, np.linalg.norm(cand - queries[:, None, :], axis=2), np.inf)
        ids = np.where(ok, self._ids[safe], np.iinfo(np.int64).max)
        order = np.lexsort((ids, d), axis=1)
        take = min(k, kk)
        sel = np.take_along_axis(safe, order, axis=1)[:, :take]
        dsel = np.take_along_axis(d, order, axis=1)[:, :take]
        pts[:, :take] = self._points[sel]
        dists[:, :take] = dsel
        valid[:, :take] = np.isfinite(dsel) & (dsel <= max_dist)
        pts[~valid] = 0.0
        dists[~valid] = np.inf
        if return_index:
            index[:, :take] = sel
            index[~valid] = -1
            return pts, dists, valid, index
        return pts, dists, valid


@dataclass(frozen=True)
class MapParams:
    edge_voxel: float = 0.4
    plane_voxel: float = 0.8
    window_radius: float = 100.0
    max_dist: float = 1.0


class FeatureMap:
    def __init__(self, params: MapParams = MapParams(), workers: int = 1):
        self.params = params
        self.edge = VoxelCloud(params.edge_voxel, workers)
        self.plane = VoxelCloud(params.plane_voxel, workers)

    def __len__(self) -> int:
        return len(self.edge) + len(self.plane)

    def insert(self, points: np.ndarray, which: str) -> int:
        return self._cloud(which).insert(points)

    def nearest_k(self, q: np.ndarray, k: int, which: str, max_dist: float | None = None,
                  return_index: bool = False):
        if max_dist is None:
            max_dist = self.params.max_dist
        return self._cloud(which).nearest_k(q, k, max_dist, return_index)

    def window(self, center: np.ndarray) -> None:
        self.edge.crop(center, self.params.window_radius)
        self.plane.crop(center, self.params.window_radius)

    def _cloud(self, which: str) -> VoxelCloud:
        if which == "edge":
            return self.edge
        if which == "plane":
            return self.plane
        raise ValueError(f"unknown map {which!r}")

    def export(self, path_prefix) -> None:
        """Write ``<prefix>_edge.bin`` and ``<prefix>_plane.bin`` as little-endian float32 xyz."""
        for name, cloud in (("edge", self.edge), ("plane", self.plane)):
            cloud.points().astype("<f4").tofile(f"{path_prefix}_{name}.bin")


def downsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    cloud = VoxelCloud(voxel_size)
    cloud.insert(points)
    return cloud.points().copy()


def load_map_points(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(-1, 3).astype(float)
