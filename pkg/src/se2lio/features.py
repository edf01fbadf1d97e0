"""Edge / planar feature selection from per-ring local smoothness."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_RANGE = 0.1
MAX_RANGE = 100.0


@dataclass
class RawScan:
    """One LiDAR sweep.

    ``time`` is the acquisition time relative to the sweep, in [0, 1).
    Points of each ring are stored in acquisition order.
    """

    points: np.ndarray
    ring: np.ndarray
    time: np.ndarray
    intensity: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        self.ring = np.asarray(self.ring, dtype=np.int64).reshape(n)
        self.time = np.asarray(self.time, dtype=float).reshape(n)
        if self.intensity is None:
            self.intensity = np.zeros(n)
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(n)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> "RawScan":
        return RawScan(self.points[mask], self.ring[mask], self.time[mask], self.intensity[mask])

    def with_points(self, points: np.ndarray) -> "RawScan":
        return RawScan(points, self.ring.copy(), self.time.copy(), self.intensity.copy())

    def range_filtered(self, min_range: float = MIN_RANGE, max_range: float = MAX_RANGE) -> "RawScan":
        r = np.linalg.norm(self.points, axis=1)
        return self.subset((r > min_range) & (r <= max_range) & np.all(np.isfinite(self.points), axis=1))

    @classmethod
    def empty(cls) -> "RawScan":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))


@dataclass
class FeatureScan:
    edges: RawScan = field(default_factory=RawScan.empty)
    planars: RawScan = field(default_factory=RawScan.empty)
    edge_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    planar_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # every usable point below the threshold; the capped ``planars`` are drawn from it
    surface: RawScan = field(default_factory=RawScan.empty)
    surface_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def map(self, fn, parts=("edges", "planars", "surface")) -> "FeatureScan":
        """Apply a RawScan -> RawScan function to the named point sets in one call.

        Sets left out of ``parts`` are carried over unchanged.
        """
        sets = [getattr(self, name) for name in parts]
        sizes = np.cumsum([0] + [len(x) for x in sets])
        joined = fn(RawScan(
            np.concatenate([x.points for x in sets]), np.concatenate([x.ring for x in sets]),
            np.concatenate([x.time for x in sets]), np.concatenate([x.intensity for x in sets])))
        out = {name: getattr(self, name) for name in ("edges", "planars", "surface")}
        for name, a, b in zip(parts, sizes[:-1], sizes[1:]):
            out[name] = joined.subset(slice(a, b))
        return FeatureScan(out["edges"], out["planars"], self.edge_index, self.planar_index,
                           out["surface"], self.surface_index)


@dataclass(frozen=True)
class FeatureParams:
    half_window: int = 5
    sigma_th: float = 0.1
    sectors: int = 6
    max_edges: int = 2
    max_planars: int = 4
    suppress_radius: int = 5
    # relative range change between ring neighbours that counts as a depth jump
    occlusion_ratio: float = 0.1
    # beams hitting a surface beyond this incidence angle (radians) are unreliable
    max_incidence: float = np.deg2rad(60.0)


def smoothness(ring: np.ndarray, n: int, half_window: int) -> float:
    """Mean distance from point ``n`` to its 2*half_window ring neighbours, over its range.

    The centre point is not part of the neighbourhood.
    """
    ring = np.asarray(ring, dtype=float)
    if n - half_window < 0 or n + half_window >= len(ring):
        raise ValueError("neighbourhood leaves the ring")
    p = ring[n]
    norm = np.linalg.norm(p)
    if norm == 0.0:
        raise ValueError("zero-range point")
    nb = np.concatenate([ring[n - half_window:n], ring[n + 1:n + half_window + 1]])
    return float(np.linalg.norm(nb - p, axis=1).sum() / (2 * half_window * norm))


def ring_smoothness(ring: np.ndarray, half_window: int) -> np.ndarray:
    """Vectorised ``smoothness`` for a whole ring; NaN where the window is incomplete."""
    ring = np.asarray(ring, dtype=float)
    n = len(ring)
    out = np.full(n, np.nan)
    if n < 2 * half_window + 1:
        return out
    idx = np.arange(half_window, n - half_window)
    total = np.zeros(len(idx))
    for off in range(1, half_window + 1):
        total += np.linalg.norm(ring[idx - off] - ring[idx], axis=1)
        total += np.linalg.norm(ring[idx + off] - ring[idx], axis=1)
    out[idx] = total / (2 * half_window * np.linalg.norm(ring[idx], axis=1))
    return out


def _boundary_masks(ring: np.ndarray, half_window: int, ratio: float):
    """Classify points around depth discontinuities of one ring.

    Returns (before, after, spanned): ``before`` / ``after`` mark the
    foreground point right before / after a jump, ``spanned`` every point
    whose window contains a jump. A window that
    straddles a jump inflates the smoothness of points that are not on any
    edge, so only the foreground boundary point itself stays usable.
    """
    n = len(ring)
    before = np.zeros(n, dtype=bool)
    after = np.zeros(n, dtype=bool)
    spanned = np.zeros(n, dtype=bool)
    if n < 2:
        return before, after, spanned
    r = np.linalg.norm(ring, axis=1)
    jump = np.abs(np.diff(r)) > ratio * np.minimum(r[:-1], r[1:])
    for k in np.flatnonzero(jump):
        if r[k] < r[k + 1]:
            before[k] = True
        else:
            after[k + 1] = True
        spanned[max(0, k - half_window + 1):k + half_window + 1] = True
    return before, after, spanned


def _grazing(ring: np.ndarray, max_incidence: float):
    """Per-side grazing flags (prev, next) for each point of a ring.

    The gap to a neighbour is compared with the gap a surface facing the
    beam would give at the same angular step; a ratio above
    1 / cos(max_incidence) means the beam hits the surface at a shallow angle.
    """
    n = len(ring)
    prev = np.zeros(n, dtype=bool)
    nxt = np.zeros(n, dtype=bool)
    if n < 2:
        return prev, nxt
    a, b = ring[:-1], ring[1:]
    ra, rb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    cosang = np.clip(np.einsum("ij,ij->i", a, b) / (ra * rb), -1.0, 1.0)
    facing = np.minimum(ra, rb) * np.arccos(cosang)
    shallow = np.linalg.norm(b - a, axis=1) * np.cos(max_incidence) > facing
    nxt[:-1] = shallow
    prev[1:] = shallow
    return prev, nxt


def extract(scan: RawScan, params: FeatureParams = FeatureParams()) -> FeatureScan:
    """Split ``scan`` into edge and planar features.

    Per ring and azimuth sector, the highest-smoothness points above the
    threshold become edges and the lowest below it become planars, with
    per-sector caps. Selecting a point suppresses its ring neighbours.
    All usable points below the threshold are also returned as ``surface``,
    which feeds the plane map.
    """
    if len(scan) == 0:
        return FeatureScan()
    r = np.linalg.norm(scan.points, axis=1)
    keep = (r > MIN_RANGE) & (r <= MAX_RANGE) & np.all(np.isfinite(scan.points), axis=1)
    w = params.half_window
    edge_idx: list[np.ndarray] = []
    plane_idx: list[np.ndarray] = []
    surf_idx: list[np.ndarray] = []
    for m in np.unique(scan.ring[keep]):
        members = np.flatnonzero(keep & (scan.ring == m))
        members = members[np.argsort(scan.time[members], kind="stable")]
        pts = scan.points[members]
        sigma = ring_smoothness(pts, w)
        before, after, spanned = _boundary_masks(pts, w, params.occlusion_ratio)
        g_prev, g_next = _grazing(pts, params.max_incidence)
        usable = np.isfinite(sigma) & ~(g_prev & g_next)
        # a foreground boundary point is only trusted if its own surface faces the beam
        trusted = (before & ~after & ~g_prev) | (after & ~before & ~g_next)
        edge_ok = usable & ((~spanned & ~before & ~after) | trusted)
        plane_ok = usable & ~spanned
        surf_idx.append(members[plane_ok & (sigma < params.sigma_th)])
        n = len(pts)
        picked = np.zeros(n, dtype=bool)
        bounds = np.linspace(w, n - w, params.sectors + 1).astype(int)
        for s in range(params.sectors):
            lo, hi = bounds[s], bounds[s + 1]
            if hi <= lo:
                continue
            cand = np.arange(lo, hi)
            # edges: largest smoothness first; ties broken by index
            ce = cand[edge_ok[cand]]
            order = ce[np.lexsort((ce, -sigma[ce]))]
            count = 0
            for k in order:
                if count >= params.max_edges or sigma[k] <= params.sigma_th:
                    break
                if picked[k]:
                    continue
                edge_idx.append(members[k])
                count += 1
                picked[max(0, k - params.suppress_radius):k + params.suppress_radius + 1] = True
            cp = cand[plane_ok[cand]]
            order = cp[np.lexsort((cp, sigma[cp]))]
            count = 0
            for k in order:
                if count >= params.max_planars or sigma[k] >= params.sigma_th:
                    break
                if picked[k]:
                    continue
                plane_idx.append(members[k])
                count += 1
                picked[max(0, k - params.suppress_radius):k + params.suppress_radius + 1] = True
    e = np.array(sorted(edge_idx), dtype=np.int64)
    p = np.array(sorted(plane_idx), dtype=np.int64)
    s = np.sort(np.concatenate(surf_idx)) if surf_idx else np.zeros(0, dtype=np.int64)
    return FeatureScan(scan.subset(e), scan.subset(p), e, p, scan.subset(s), s)
