"""Axis-aligned bounding-box hierarchy over triangles.

Built in numpy (median split on the widest centroid axis), traversed in
numba.  Two queries are provided: closest ray hit and nearest triangle to a
point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF_SIZE = 4


@dataclass
class BVH:
    triangles: np.ndarray  # (F, 3, 3), in original face order
    order: np.ndarray      # leaf slot -> face index
    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray

    @classmethod
    def build(cls, triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> "BVH":
        tri = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        n = len(tri)
        lo_f = tri.min(axis=1)
        hi_f = tri.max(axis=1)
        cen = tri.mean(axis=1)
        order = np.arange(n)
        bmin, bmax, left, right, start, count = [], [], [], [], [], []

        def new_node():
            bmin.append(np.zeros(3))
            bmax.append(np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            return len(bmin) - 1

        if n == 0:
            node = new_node()
            bmin[node] = np.full(3, np.inf)
            bmax[node] = np.full(3, -np.inf)
        else:
            root = new_node()
            stack = [(root, 0, n)]
            while stack:
                node, s, e = stack.pop()
                idx = order[s:e]
                bmin[node] = lo_f[idx].min(axis=0)
                bmax[node] = hi_f[idx].max(axis=0)
                if e - s <= leaf_size:
                    start[node] = s
                    count[node] = e - s
                    continue
                c = cen[idx]
                axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
                mid = (e - s) // 2
                part = np.argpartition(c[:, axis], mid, kind="introselect")
                order[s:e] = idx[part]
                l_node, r_node = new_node(), new_node()
                left[node] = l_node
                right[node] = r_node
                stack.append((r_node, s + mid, e))
                stack.append((l_node, s, s + mid))
        return cls(tri, order, np.array(bmin), np.array(bmax), np.array(left, dtype=np.int64),
                   np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
                   np.array(count, dtype=np.int64))

    def intersect(self, origins, directions, tmin: float = 1e-9, tmax: float = np.inf):
        """Closest hit per ray.  Returns ``(t, face, bary)``; face is -1 on a miss."""
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        d = np.broadcast_to(d, o.shape).copy() if len(d) != len(o) else d
        return _intersect_rays(o, d, float(tmin), float(tmax), self.triangles, self.order,
                               self.bmin, self.bmax, self.left, self.right, self.start, self.count)

    def nearest(self, points):
        """Distance, face index and closest point for every query point."""
        p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise ValueError("empty BVH")
        return _nearest(p, self.triangles, self.order, self.bmin, self.bmax, self.left,
                        self.right, self.start, self.count)


@numba.njit(cache=True)
def _ray_box(ox, oy, oz, ix, iy, iz, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    for k, (o, inv) in enumerate(((ox, ix), (oy, iy), (oz, iz))):
        ta = (lo[k] - o) * inv
        tb = (hi[k] - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta != ta:  # 0 * inf when the ray lies in a slab plane
            ta = -np.inf
        if tb != tb:
            tb = np.inf
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _intersect_rays(origins, dirs, tmin, tmax, tri, order, bmin, bmax, left, right, start, count):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    f_out = np.full(n, -1, dtype=np.int64)
    b_out = np.zeros((n, 3))
    stack = np.empty(128, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best = tmax
        best_f = -1
        bu = 0.0
        bv = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _ray_box(ox, oy, oz, ix, iy, iz, bmin[node], bmax[node], best):
                continue
            if count[node] > 0:
                for s in range(start[node], start[node] + count[node]):
                    f = order[s]
                    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
                    e1x, e1y, e1z = tri[f, 1, 0] - ax, tri[f, 1, 1] - ay, tri[f, 1, 2] - az
                    e2x, e2y, e2z = tri[f, 2, 0] - ax, tri[f, 2, 1] - ay, tri[f, 2, 2] - az
                    px = dy * e2z - dz * e2y
                    py = dz * e2x - dx * e2z
                    pz = dx * e2y - dy * e2x
                    det = e1x * px + e1y * py + e1z * pz
                    if abs(det) < 1e-300:
                        continue
                    inv = 1.0 / det
                    tx, ty, tz = ox - ax, oy - ay, oz - az
                    u = (tx * px + ty * py + tz * pz) * inv
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = ty * e1z - tz * e1y
                    qy = tz * e1x - tx * e1z
                    qz = tx * e1y - ty * e1x
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if t > tmin and (t < best or (t == best and f < best_f)):
                        best = t
                        best_f = f
                        bu = u
                        bv = v
            else:
                stack[sp] = right[node]
                sp += 1
                stack[sp] = left[node]
                sp += 1
        if best_f >= 0:
            t_out[r] = best
            f_out[r] = best_f
            b_out[r, 0] = 1.0 - bu - bv
            b_out[r, 1] = bu
            b_out[r, 2] = bv
    return t_out, f_out, b_out


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, tri, f):
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    bx, by, bz = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
    cx, cy, cz = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@numba.njit(cache=True)
def _box_dist2(px, py, pz, lo, hi):
    d = 0.0
    for k, p in enumerate((px, py, pz)):
        if p < lo[k]:
            d += (lo[k] - p) ** 2
        elif p > hi[k]:
            d += (p - hi[k]) ** 2
    return d


@numba.njit(cache=True)
def _nearest(points, tri, order, bmin, bmax, left, right, start, count):
    n = points.shape[0]
    dist = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    closest = np.empty((n, 3))
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        best_f = -1
        qx = qy = qz = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(px, py, pz, bmin[node], bmax[node]) > best:
                continue
            if count[node] > 0:
                for s in range(start[node], start[node] + count[node]):
                    f = order[s]
                    cx, cy, cz = _closest_on_triangle(px, py, pz, tri, f)
                    d2 = (px - cx) ** 2 + (py - cy) ** 2 + (pz - cz) ** 2
                    if d2 < best or (d2 == best and f < best_f):
                        best = d2
                        best_f = f
                        qx, qy, qz = cx, cy, cz
            else:
                l, r = left[node], right[node]
                dl = _box_dist2(px, py, pz, bmin[l], bmax[l])
                dr = _box_dist2(px, py, pz, bmin[r], bmax[r])
                # push the farther child first so the nearer one is popped next
                if dl <= dr:
                    stack[sp] = r
                    sp += 1
                    stack[sp] = l
                    sp += 1
                else:
                    stack[sp] = l
                    sp += 1
                    stack[sp] = r
                    sp += 1
        dist[i] = np.sqrt(best)
        face[i] = best_f
        closest[i, 0] = qx
        closest[i, 1] = qy
        closest[i, 2] = qz
    return dist, face, closest
