"""Ground classification by seeded region growing on a 2D height grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import as_points
from .registration import RayCloud


class GroundError(RuntimeError):
    pass


@dataclass
class GroundGrid:
    cell: float
    origin: np.ndarray        # xy of cell (0, 0)'s lower corner
    height: np.ndarray        # lowest point height per cell, NaN where empty
    classified: np.ndarray    # bool per cell
    seed: tuple[int, int]

    def cell_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.floor((xy - self.origin) / self.cell).astype(np.int64)

    def ground_height(self, xy) -> np.ndarray:
        """Height of the nearest classified cell (used for heights above ground)."""
        if not self.classified.any():
            return np.zeros(len(np.asarray(xy).reshape(-1, 2)))
        if not hasattr(self, "_filled"):
            _, (ii, jj) = ndimage.distance_transform_edt(~self.classified, return_indices=True)
            self._filled = self.height[ii, jj]
        ij = self.cell_of(xy)
        ij[:, 0] = np.clip(ij[:, 0], 0, self.height.shape[0] - 1)
        ij[:, 1] = np.clip(ij[:, 1], 0, self.height.shape[1] - 1)
        return self._filled[ij[:, 0], ij[:, 1]]


@dataclass
class GroundSegmentation:
    ground: np.ndarray   # bool per input point
    grid: GroundGrid

    @property
    def non_ground(self) -> np.ndarray:
        return ~self.ground


def _window_offsets(gap: int):
    r = gap + 1
    return [(di, dj) for di in range(0, r + 1) for dj in range(-r, r + 1)
            if (di > 0 or dj > 0) and di * di + dj * dj <= r * r]


def segment_ground(cloud, sensor_center, cell: float = 0.5, dh: float = 0.15, delta: float = 0.20,
                   gap: int = 1, seed_radius: float = 0.0) -> GroundSegmentation:
    """Classify ground points by growing from the cell under the sensor.

    Occupied cells are linked when they lie within ``gap`` empty cells of
    each other and their lowest-point heights differ by at most ``dh``; the
    ground is the linked component containing the seed cell.  A point is
    ground when its cell is classified and it lies within ``delta`` above
    the cell height.  When the seed cell holds no points, the nearest
    occupied cell within ``seed_radius`` metres is used instead.
    """
    pts = cloud.points if isinstance(cloud, RayCloud) else as_points(cloud)
    if len(pts) == 0:
        raise GroundError("empty cloud")
    center = np.asarray(sensor_center, dtype=np.float64).reshape(3)
    lo = np.minimum(pts[:, :2].min(axis=0), center[:2])
    hi = np.maximum(pts[:, :2].max(axis=0), center[:2])
    origin = np.floor(lo / cell) * cell
    shape = tuple(np.floor((hi - origin) / cell).astype(np.int64) + 1)
    ij = np.floor((pts[:, :2] - origin) / cell).astype(np.int64)
    ij = np.minimum(ij, np.array(shape) - 1)
    flat = ij[:, 0] * shape[1] + ij[:, 1]
    height = np.full(shape[0] * shape[1], np.inf)
    np.minimum.at(height, flat, pts[:, 2])
    height = height.reshape(shape)
    occupied = np.isfinite(height)
    height[~occupied] = np.nan

    seed = tuple(np.floor((center[:2] - origin) / cell).astype(np.int64))
    if not occupied[seed]:
        oi, oj = np.nonzero(occupied)
        d = np.hypot(oi - seed[0], oj - seed[1]) * cell
        k = int(np.argmin(d)) if len(d) else -1
        if k < 0 or d[k] > seed_radius:
            raise GroundError("no ground under sensor")
        seed = (int(oi[k]), int(oj[k]))

    # graph of occupied cells, linked across small gaps by height continuity
    ids = -np.ones(shape, dtype=np.int64)
    oi, oj = np.nonzero(occupied)
    ids[oi, oj] = np.arange(len(oi))
    rows, cols = [], []
    for di, dj in _window_offsets(gap):
        a_i, a_j = oi, oj
        b_i, b_j = oi + di, oj + dj
        ok = (b_i >= 0) & (b_i < shape[0]) & (b_j >= 0) & (b_j < shape[1])
        a_i, a_j, b_i, b_j = a_i[ok], a_j[ok], b_i[ok], b_j[ok]
        ok = occupied[b_i, b_j]
        ok &= np.abs(height[a_i, a_j] - np.where(ok, height[b_i, b_j], np.inf)) <= dh
        rows.append(ids[a_i[ok], a_j[ok]])
        cols.append(ids[b_i[ok], b_j[ok]])
    n = len(oi)
    r, c = np.concatenate(rows), np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
    _, label = connected_components(graph, directed=False)
    classified = np.zeros(shape, dtype=bool)
    seed_label = label[ids[seed]]
    classified[oi, oj] = label == seed_label

    cls = classified.reshape(-1)[flat]
    h = height.reshape(-1)[flat]
    ground = cls & (pts[:, 2] - h <= delta)
    return GroundSegmentation(ground, GroundGrid(cell, origin, height, classified, seed))


def restore_ground(non_ground: RayCloud, ground: RayCloud) -> RayCloud:
    """Disjoint union of the two clouds, rays preserved."""
    return RayCloud.concatenate([non_ground, ground])
