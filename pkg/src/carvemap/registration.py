"""Scan-to-map alignment, range filtering and voxel downsampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform, as_points

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclass
class AlignedScan:
    scan_id: int
    points: np.ndarray          # world frame
    sensor_center: np.ndarray
    pose: RigidTransform        # world <- sensor
    index: np.ndarray | None = None  # rows of the raw scan that survived filtering

    def __post_init__(self):
        self.points = as_points(self.points)
        self.sensor_center = np.asarray(self.sensor_center, dtype=np.float64).reshape(3)
        if self.index is None:
            self.index = np.arange(len(self.points))

    def __len__(self):
        return len(self.points)


@dataclass
class RayCloud:
    """Points with the sensor position that observed each one."""

    points: np.ndarray
    origins: np.ndarray
    scan_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = as_points(self.points)
        self.origins = np.broadcast_to(np.asarray(self.origins, dtype=np.float64), self.points.shape).copy()
        if self.scan_index is None:
            self.scan_index = np.zeros(len(self.points), dtype=np.int64)
        self.scan_index = np.asarray(self.scan_index, dtype=np.int64).reshape(-1)
        if len(self.scan_index) != len(self.points):
            raise ValueError("one scan index per point required")

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "RayCloud":
        return RayCloud(self.points[mask], self.origins[mask], self.scan_index[mask])

    @classmethod
    def concatenate(cls, clouds) -> "RayCloud":
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
        return cls(np.concatenate([c.points for c in clouds]), np.concatenate([c.origins for c in clouds]),
                   np.concatenate([c.scan_index for c in clouds]))

    @classmethod
    def from_scans(cls, scans: list[AlignedScan]) -> "RayCloud":
        return cls.concatenate(cls(s.points, s.sensor_center, np.full(len(s), s.scan_id)) for s in scans)


def estimate_normals(points: np.ndarray, k: int = 10, tree: cKDTree | None = None) -> np.ndarray:
    """Unit normals from the smallest principal axis of each k-neighbourhood."""
    tree = tree or cKDTree(points)
    k = min(k, len(points))
    _, nn = tree.query(points, k=k)
    nb = points[nn.reshape(len(points), -1)]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _mean_nn(tree, pts, cap):
    d, _ = tree.query(pts, distance_upper_bound=cap)
    d = np.where(np.isfinite(d), d, cap)
    return float(d.mean())


def align_scan(scan, reference, initial: RigidTransform | None = None, *, max_iterations: int = 50,
               tolerance: float = 1e-5, max_correspondence: float = 1.0, inlier_distance: float = 0.2,
               min_inlier_fraction: float = 0.3, reference_normals=None, reference_tree=None) -> RigidTransform:
    """Point-to-plane ICP of ``scan`` onto ``reference``; returns the world <- scan transform.

    Iterates until the mean correspondence residual changes by less than
    ``tolerance`` or ``max_iterations`` is reached.  The last iterate is
    returned unless its mean nearest-neighbour distance is worse than the
    initial guess, in which case the initial guess is kept.
    """
    src = as_points(scan)
    ref = as_points(reference)
    if len(src) < 100 or len(ref) < 100:
        raise RegistrationError("registration failure: need at least 100 points in each cloud")
    T = initial or RigidTransform()
    tree = reference_tree or cKDTree(ref)
    normals = estimate_normals(ref, tree=tree) if reference_normals is None else reference_normals

    def score(T):
        return _mean_nn(tree, T.apply(src), max_correspondence)

    T0, score0 = T, score(T)
    prev = np.inf
    for it in range(max_iterations):
        p = T.apply(src)
        d, j = tree.query(p, distance_upper_bound=max_correspondence)
        ok = np.isfinite(d)
        if ok.sum() < 6:
            break
        p, q, n = p[ok], ref[j[ok]], normals[j[ok]]
        r = np.einsum("ij,ij->i", p - q, n)
        A = np.concatenate([np.cross(p, n), n], axis=1)
        H = A.T @ A + 1e-9 * np.eye(6)
        x = -np.linalg.solve(H, A.T @ r)
        dT = RigidTransform(Rotation.from_rotvec(x[:3]).as_matrix(), x[3:])
        T = dT @ T
        mean_res = float(d[ok].mean())
        if abs(prev - mean_res) < tolerance:
            break
        prev = mean_res

    # the point-to-point score is biased on a voxelised map, so it only guards divergence
    best_T, best_score = (T, score(T))
    if best_score > score0:
        best_T, best_score = T0, score0
    d, _ = tree.query(best_T.apply(src), distance_upper_bound=inlier_distance)
    frac = float(np.isfinite(d).mean())
    log.debug("icp: %d iterations, inliers %.2f, mean nn %.4f", it + 1, frac, best_score)
    if frac < min_inlier_fraction:
        raise RegistrationError(f"registration failure: only {frac:.0%} inlier correspondences")
    return best_T


def range_filter(scan: AlignedScan, tau: float = 30.0) -> AlignedScan:
    """Keep exactly the points within ``tau`` metres of the sensor centre."""
    keep = np.linalg.norm(scan.points - scan.sensor_center, axis=1) <= tau
    return AlignedScan(scan.scan_id, scan.points[keep], scan.sensor_center, scan.pose, scan.index[keep])


def voxel_keys(points: np.ndarray, edge: float, origin: np.ndarray) -> np.ndarray:
    return np.floor((points - origin) / edge).astype(np.int64)


def _voxel_count(points, edge, origin):
    return len(np.unique(voxel_keys(points, edge, origin), axis=0))


def voxel_edge_for_fraction(points: np.ndarray, fraction: float, max_edge: float = 2.0,
                            iterations: int = 60) -> float:
    """Voxel edge whose occupied-voxel count is closest to ``fraction * len(points)``.

    Bisection in log space between a vanishing edge and ``max_edge``; the
    count is (nearly) monotone in the edge length.
    """
    target = fraction * len(points)
    origin = points.min(axis=0)
    extent = float(np.ptp(points, axis=0).max())
    hi = max_edge
    if extent == 0 or _voxel_count(points, hi, origin) >= target:
        return hi
    lo = max(extent * 1e-7, 1e-9)
    best, best_err = hi, abs(_voxel_count(points, hi, origin) - target)
    for _ in range(iterations):
        mid = np.sqrt(lo * hi)
        c = _voxel_count(points, mid, origin)
        err = abs(c - target)
        if err < best_err:
            best, best_err = mid, err
        if abs(c - target) <= 0.02 * target:
            break
        if c > target:
            lo = mid
        else:
            hi = mid
    return best


def downsample(cloud: RayCloud, fraction: float = 0.01, max_edge: float = 2.0,
               edge: float | None = None) -> tuple[RayCloud, np.ndarray]:
    """Voxel-grid downsampling to about ``fraction`` of the input size.

    Each occupied voxel yields its centroid, carrying the sensor origin and
    scan index of the input point nearest to that centroid.  ``max_edge``
    caps the voxel size so sparse clouds are not collapsed.  Returns the
    downsampled cloud and, per output point, the index of that input point.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if len(cloud) == 0:
        return cloud.subset(np.zeros(0, dtype=bool)), np.zeros(0, dtype=np.int64)
    pts = cloud.points
    origin = pts.min(axis=0)
    if edge is None:
        edge = voxel_edge_for_fraction(pts, fraction, max_edge)
    _, inv, counts = np.unique(voxel_keys(pts, edge, origin), axis=0, return_inverse=True,
                               return_counts=True)
    inv = inv.reshape(-1)
    n = len(counts)
    cent = np.zeros((n, 3))
    np.add.at(cent, inv, pts)
    cent /= counts[:, None]
    # representative: input point nearest to its voxel centroid
    d = np.linalg.norm(pts - cent[inv], axis=1)
    order = np.lexsort((d, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order[1:]] != inv[order[:-1]]
    rep = np.empty(n, dtype=np.int64)
    rep[inv[order[first]]] = order[first]
    log.debug("downsample: %d -> %d points (voxel %.3f m)", len(pts), n, edge)
    return RayCloud(cent, cloud.origins[rep], cloud.scan_index[rep]), rep


def register_scans(scans: list[np.ndarray], poses: list[RigidTransform] | None = None,
                   use_gt_poses: bool = False, tau: float = 30.0, map_voxel: float = 0.1,
                   scan_voxel: float = 0.15, **icp) -> list[AlignedScan]:
    """Align raw sensor-frame scans by scan-to-map ICP.

    The map frame is the provided world frame when poses are given (scan 0 is
    anchored at its pose), else the frame of the first scan.  With
    ``use_gt_poses`` the provided poses are used directly.  A failed
    alignment falls back to the provided pose when there is one.
    """
    if use_gt_poses and poses is None:
        raise RegistrationError("ground-truth poses requested but none provided")
    out: list[AlignedScan] = []
    map_pts = np.zeros((0, 3))
    for k, raw in enumerate(scans):
        raw = as_points(raw)
        if use_gt_poses:
            T = poses[k]
        elif k == 0:
            T = poses[0] if poses is not None else RigidTransform()
        else:
            src = raw[_voxel_pick(raw, scan_voxel)]
            try:
                T = align_scan(src, map_pts, out[-1].pose, **icp)
            except RegistrationError as exc:
                if poses is None:
                    raise
                log.warning("scan %d: %s; falling back to provided pose", k, exc)
                T = poses[k]
        aligned = range_filter(AlignedScan(k, T.apply(raw), T.translation, T), tau)
        out.append(aligned)
        map_pts = np.concatenate([map_pts, aligned.points])
        map_pts = map_pts[_voxel_pick(map_pts, map_voxel)]
    return out


def _voxel_pick(points: np.ndarray, edge: float) -> np.ndarray:
    """Index of one point per occupied voxel (first occurrence)."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    _, first = np.unique(voxel_keys(points, edge, points.min(axis=0)), axis=0, return_index=True)
    return np.sort(first)
