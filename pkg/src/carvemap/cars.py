"""Parked-car detection on a 2D height grid and convex-hull replacement meshes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .geometry import GeometryError, TriangleMesh, as_points

log = logging.getLogger(__name__)

RHO_MIN, RHO_MAX = 1.5, 5.5
RATIO_MIN, RATIO_MAX = 1.2 / 5.0, 3.5 / 5.0
RAMP_MIN = np.pi / 6
FLAT_MAX = np.pi / 3


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    length: float
    width: float
    yaw: float  # direction of the length axis

    @property
    def rho(self) -> float:
        return float(np.hypot(self.length / 2, self.width / 2))

    @property
    def ratio(self) -> float:
        return self.width / self.length if self.length > 0 else 0.0

    @property
    def axis(self) -> np.ndarray:
        return np.array([np.cos(self.yaw), np.sin(self.yaw)])

    def local(self, xy) -> np.ndarray:
        """Coordinates along (length, width) relative to the centre."""
        d = np.asarray(xy, dtype=np.float64).reshape(-1, 2) - self.center
        a = self.axis
        return np.column_stack([d @ a, d @ np.array([-a[1], a[0]])])


@dataclass
class CarCluster:
    points: np.ndarray
    box: OrientedBox
    region: int = -1

    @property
    def rho(self) -> float:
        return self.box.rho


@dataclass
class CandidateGrid:
    cell: float
    origin: np.ndarray
    occupied: np.ndarray     # after emptying tall cells and closing
    labels: np.ndarray       # 8-connected region labels, 0 = none
    n_regions: int
    point_cells: np.ndarray  # (N, 2) cell index of every input point

    def region_of_points(self) -> np.ndarray:
        i, j = self.point_cells.T
        return self.labels[i, j]

    def region_cells(self, label: int) -> np.ndarray:
        return np.argwhere(self.labels == label)

    def lookup(self, xy) -> np.ndarray:
        """Region label at arbitrary xy positions (0 outside the grid)."""
        ij = np.floor((np.asarray(xy, dtype=np.float64).reshape(-1, 2) - self.origin) / self.cell).astype(np.int64)
        inside = np.all((ij >= 0) & (ij < self.labels.shape), axis=1)
        out = np.zeros(len(ij), dtype=self.labels.dtype)
        out[inside] = self.labels[ij[inside, 0], ij[inside, 1]]
        return out


def rasterize_candidates(points, heights, cell: float = 0.1, tau: float = 2.2,
                         closing: bool = True) -> CandidateGrid:
    """Occupancy of non-ground points on the ground plane, tall cells emptied.

    ``heights`` are the point heights above the local ground.  Cells holding
    any point above ``tau`` are emptied, then a 3x3 closing is applied and
    8-connected regions are labelled.
    """
    pts = as_points(points)
    heights = np.asarray(heights, dtype=np.float64).reshape(-1)
    if len(pts) == 0:
        z = np.zeros((1, 1), dtype=bool)
        return CandidateGrid(cell, np.zeros(2), z, np.zeros((1, 1), np.int32), 0, np.zeros((0, 2), np.int64))
    # one cell of padding on every side so the closing is not clipped at the border
    origin = np.floor(pts[:, :2].min(axis=0) / cell) * cell - 2 * cell
    ij = np.floor((pts[:, :2] - origin) / cell).astype(np.int64)
    shape = tuple(ij.max(axis=0) + 3)
    occ = np.zeros(shape, dtype=bool)
    occ[ij[:, 0], ij[:, 1]] = True
    tall = np.zeros(shape, dtype=bool)
    hi = heights > tau
    tall[ij[hi, 0], ij[hi, 1]] = True
    occ &= ~tall
    if closing:
        occ = ndimage.binary_closing(occ, structure=np.ones((3, 3), dtype=bool))
    labels, n = ndimage.label(occ, structure=np.ones((3, 3), dtype=int))
    return CandidateGrid(cell, origin, occ, labels, int(n), ij)


def min_area_rectangle(xy) -> OrientedBox:
    """Minimum-area enclosing rectangle (rotating calipers over hull edges)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        raise ValueError("empty region")
    try:
        hull = xy[ConvexHull(xy).vertices]
    except (QhullError, ValueError):
        hull = xy  # collinear or tiny input
    if len(hull) == 1:
        return OrientedBox(tuple(hull[0]), 0.0, 0.0, 0.0)
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best = None
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, s], [-s, c]])
        p = hull @ R.T
        lo, hi = p.min(axis=0), p.max(axis=0)
        area = np.prod(hi - lo)
        if best is None or area < best[0] - 1e-12:
            best = (area, a, lo, hi, R)
    _, a, lo, hi, R = best
    ext = hi - lo
    center = R.T @ ((lo + hi) / 2)
    if ext[0] >= ext[1]:
        yaw, length, width = a, ext[0], ext[1]
    else:
        yaw, length, width = a + np.pi / 2, ext[1], ext[0]
    return OrientedBox((float(center[0]), float(center[1])), float(length), float(width),
                       float(np.mod(yaw, np.pi)))


def cell_corners(cells: np.ndarray, origin, cell: float) -> np.ndarray:
    c = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
    offs = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.float64)
    return (origin + (c[:, None, :] + offs[None]) * cell).reshape(-1, 2)


def box_passes(box: OrientedBox, rho=(RHO_MIN, RHO_MAX), ratio=(RATIO_MIN, RATIO_MAX)) -> bool:
    return rho[0] < box.rho < rho[1] and ratio[0] < box.ratio < ratio[1]


def box_filter(region_xy, rho=(RHO_MIN, RHO_MAX), ratio=(RATIO_MIN, RATIO_MAX)) -> tuple[bool, OrientedBox]:
    """Oriented box of a region (2D points, e.g. its cell corners) and the size test."""
    box = min_area_rectangle(region_xy)
    return box_passes(box, rho, ratio), box


def silhouette_columns(points, heights, box: OrientedBox, cell: float = 0.1) -> np.ndarray:
    """White-pixel count per column of the rasterised convex hull of the side view.

    Columns run along the box length; rows are heights above ground.
    """
    s = box.local(np.asarray(points, dtype=np.float64)[:, :2])[:, 0]
    h = np.asarray(heights, dtype=np.float64).reshape(-1)
    uv = np.column_stack([s, h]) / cell
    # cells overlapping the extent; an extent ending on a cell boundary adds no column
    c0, c1 = int(np.floor(uv[:, 0].min())), int(np.ceil(uv[:, 0].max()))
    r0, r1 = int(np.floor(uv[:, 1].min())), int(np.ceil(uv[:, 1].max()))
    cols = np.arange(c0, max(c1, c0 + 1))
    rows = np.arange(r0, max(r1, r0 + 1))
    C, R = np.meshgrid(cols + 0.5, rows + 0.5, indexing="ij")
    centers = np.column_stack([C.ravel(), R.ravel()])
    try:
        eq = ConvexHull(uv).equations
    except (QhullError, ValueError):
        return np.zeros(len(cols), dtype=np.int64)
    inside = np.all(centers @ eq[:, :2].T + eq[:, 2] <= 1e-9, axis=1)
    return inside.reshape(len(cols), len(rows)).sum(axis=1)


def silhouette_angles(gamma) -> np.ndarray:
    """Mean slope angle of the column-height derivative in three equal bins."""
    d = np.diff(np.asarray(gamma, dtype=np.float64))
    if len(d) < 3:
        return np.full(3, np.nan)
    # rows and columns share the cell size, so the aspect factor is 1
    return np.array([np.arctan(b.mean()) for b in np.array_split(d, 3)])


def silhouette_filter(points, heights, box: OrientedBox, cell: float = 0.1, ramp_min: float = RAMP_MIN,
                      flat_max: float = FLAT_MAX) -> bool:
    gamma = silhouette_columns(points, heights, box, cell)
    if len(gamma) < 3:
        return False
    a = silhouette_angles(gamma)
    if not np.all(np.isfinite(a)):
        return False
    return bool(a[0] >= ramp_min and abs(a[1]) <= flat_max and a[2] <= -ramp_min)


@dataclass
class CarDetection:
    clusters: list[CarCluster]
    keep: np.ndarray                 # input points not in any accepted cluster
    grid: CandidateGrid
    accepted: list[int] = field(default_factory=list)   # region labels of the clusters

    def in_car_region(self, xy) -> np.ndarray:
        lab = self.grid.lookup(xy)
        return np.isin(lab, self.accepted) & (lab > 0)


def detect_cars(points, heights, cell: float = 0.1, tau: float = 2.2, rho=(RHO_MIN, RHO_MAX),
                ratio=(RATIO_MIN, RATIO_MAX), ramp_min: float = RAMP_MIN, flat_max: float = FLAT_MAX) -> CarDetection:
    """Run the grid, box and silhouette filters on a static non-ground cloud.

    ``rho`` and ``ratio`` are open intervals for the box half-diagonal and
    width/length; ``ramp_min`` and ``flat_max`` bound the silhouette slopes.
    """
    pts = as_points(points)
    heights = np.asarray(heights, dtype=np.float64).reshape(-1)
    grid = rasterize_candidates(pts, heights, cell, tau)
    region = grid.region_of_points() if len(pts) else np.zeros(0, dtype=np.int64)
    clusters, accepted = [], []
    for label in range(1, grid.n_regions + 1):
        member = region == label
        if not member.any():
            continue
        ok, box = box_filter(cell_corners(grid.region_cells(label), grid.origin, cell), rho, ratio)
        if not ok:
            continue
        if not silhouette_filter(pts[member], heights[member], box, cell, ramp_min, flat_max):
            continue
        clusters.append(CarCluster(pts[member], box, label))
        accepted.append(label)
    keep = ~np.isin(region, accepted) if accepted else np.ones(len(pts), dtype=bool)
    log.info("car detection: %d regions, %d cars", grid.n_regions, len(clusters))
    return CarDetection(clusters, keep, grid, accepted)


def convex_hull_3d(points) -> TriangleMesh:
    """Watertight convex hull with outward-facing triangles."""
    pts = as_points(points)
    if len(pts) < 4:
        raise GeometryError("convex hull needs at least 4 points")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise GeometryError(f"degenerate (coplanar) cluster: {exc}") from None
    verts = hull.vertices
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[verts] = np.arange(len(verts))
    faces = remap[hull.simplices]
    V = pts[verts]
    tri = V[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, hull.equations[:, :3]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(V, faces, manifold=True)


def car_hulls(clusters: list[CarCluster], ground_height=None) -> list[TriangleMesh]:
    """Hull meshes of all clusters; degenerate clusters are skipped with a warning.

    When ``ground_height`` (a callable on xy) is given, each cluster's
    footprint is extended down to the ground so the hull sits on it.
    """
    out = []
    for c in clusters:
        pts = c.points
        if ground_height is not None and len(pts):
            base = pts.copy()
            base[:, 2] = ground_height(pts[:, :2])
            pts = np.concatenate([pts, base])
        try:
            out.append(convex_hull_3d(pts))
        except GeometryError as exc:
            log.warning("skipping car cluster: %s", exc)
    return out
