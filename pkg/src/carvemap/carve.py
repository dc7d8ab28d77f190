"""Delaunay space carving and manifold surface extraction.

The cloud is tetrahedralised together with eight far "sky" corners, every
sensor-to-point ray votes for the tetrahedra it crosses, and the free
region is grown tetrahedron by tetrahedron while its boundary stays a
2-manifold.  The boundary, minus faces touching the sky corners, is the
reconstructed surface.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import Delaunay, QhullError

from .geometry import GeometryError, TriangleMesh, as_points, merge_meshes, split_fans

log = logging.getLogger(__name__)

JITTER = 1e-6
STALL_EPS = 1e-12


class CarveError(RuntimeError):
    pass


@dataclass
class TetrahedralComplex:
    vertices: np.ndarray    # cloud points (jittered) followed by the 8 sky corners
    tets: np.ndarray        # (M, 4) vertex indices
    neighbors: np.ndarray   # (M, 4) tet across the facet opposite each vertex, -1 outside
    n_points: int
    votes: np.ndarray = field(default=None)
    free: np.ndarray = field(default=None)
    skipped_rays: int = 0
    cast_rays: int = 0
    _delaunay: Delaunay | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.votes is None:
            self.votes = np.zeros(len(self.tets), dtype=np.int64)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def locate(self, points) -> np.ndarray:
        return self._delaunay.find_simplex(np.asarray(points, dtype=np.float64).reshape(-1, 3))

    def diagnostics(self) -> dict:
        free = int(self.free.sum()) if self.free is not None else 0
        return {
            "tetrahedra": self.n_tets,
            "free": free,
            "matter": self.n_tets - free,
            "rays": self.cast_rays,
            "skipped_rays": self.skipped_rays,
        }


def build_triangulation(points, origins=None, jitter: float = JITTER, seed: int = 0,
                        margin: float | None = None) -> TetrahedralComplex:
    """Delaunay tetrahedralisation of ``points`` plus 8 bounding corners.

    The corners enclose the points and the ray ``origins`` with a margin so
    every ray stays inside the complex.  Points are jittered by a uniform
    +-``jitter`` from a fixed seed to avoid exact degeneracies.
    """
    pts = as_points(points)
    if len(pts) < 5:
        raise GeometryError("triangulation needs at least 5 points")
    rng = np.random.default_rng(seed)
    jittered = pts + rng.uniform(-jitter, jitter, pts.shape)
    extent_pts = pts if origins is None else np.concatenate([pts, as_points(origins)])
    lo, hi = extent_pts.min(axis=0), extent_pts.max(axis=0)
    if margin is None:
        margin = max(float(np.max(hi - lo)), 1.0)
    lo, hi = lo - margin, hi + margin
    sky = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    # box corners are cospherical; perturb them so no flat cell appears among them
    sky += rng.uniform(-1e-3, 1e-3, sky.shape) * margin
    verts = np.concatenate([jittered, sky])
    try:
        tri = Delaunay(verts, qhull_options="Qbb Qc Qz Q12 Qt")
    except QhullError as exc:
        raise GeometryError(f"triangulation failed: {exc}") from None
    if len(tri.coplanar):
        log.warning("%d points were not inserted in the triangulation", len(tri.coplanar))
    tets = np.ascontiguousarray(tri.simplices, dtype=np.int64)
    nbrs = np.ascontiguousarray(tri.neighbors, dtype=np.int64)
    return TetrahedralComplex(verts, tets, nbrs, len(pts), _delaunay=tri)


@njit(cache=True)
def _side(V, a, b, c, x):
    # signed distance-like orientation of x against plane (a, b, c)
    ux, uy, uz = V[b, 0] - V[a, 0], V[b, 1] - V[a, 1], V[b, 2] - V[a, 2]
    vx, vy, vz = V[c, 0] - V[a, 0], V[c, 1] - V[a, 1], V[c, 2] - V[a, 2]
    nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
    return nx * (x[0] - V[a, 0]) + ny * (x[1] - V[a, 1]) + nz * (x[2] - V[a, 2])


@njit(cache=True)
def _walk(V, tets, nbrs, start, origin, target_idx, votes, max_steps):
    """Traverse from ``start`` along origin -> V[target_idx]; returns False on stall."""
    P = V[target_idx]
    cur = start
    prev = -1
    t_cur = 0.0
    for _ in range(max_steps):
        votes[cur] += 1
        if tets[cur, 0] == target_idx or tets[cur, 1] == target_idx or \
                tets[cur, 2] == target_idx or tets[cur, 3] == target_idx:
            return True
        best_t = np.inf
        best_f = -1
        for f in range(4):
            nb = nbrs[cur, f]
            if nb == prev and prev >= 0:
                continue
            a = tets[cur, (f + 1) % 4]
            b = tets[cur, (f + 2) % 4]
            c = tets[cur, (f + 3) % 4]
            ref = _side(V, a, b, c, V[tets[cur, f]])
            if ref == 0.0:
                continue
            so = _side(V, a, b, c, origin) / ref
            sp = _side(V, a, b, c, P) / ref
            if sp >= so:
                continue  # not leaving through this facet
            t = so / (so - sp)
            if t < t_cur - STALL_EPS:
                continue
            if t < best_t:
                best_t = t
                best_f = f
        if best_f < 0:
            return False
        if best_t >= 1.0:
            return True  # target reached inside this cell
        nxt = nbrs[cur, best_f]
        if nxt < 0:
            return False
        prev = cur
        cur = nxt
        t_cur = best_t
    return False


@njit(cache=True)
def _cast(V, tets, nbrs, starts, origins, targets, votes, max_steps):
    skipped = 0
    for r in range(len(targets)):
        if starts[r] < 0:
            skipped += 1
            continue
        if not _walk(V, tets, nbrs, starts[r], origins[r], targets[r], votes, max_steps):
            skipped += 1
    return skipped


def cast_votes(cx: TetrahedralComplex, origins, targets=None) -> TetrahedralComplex:
    """Add one vote to every tetrahedron each sensor-to-point ray crosses.

    ``origins`` is (R, 3) or a single (3,) origin; ``targets`` are vertex
    indices of the cloud points (default: all points in order).  Rays whose
    traversal fails are skipped and counted in ``cx.skipped_rays``.
    """
    targets = np.arange(cx.n_points) if targets is None else np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) and (targets.min() < 0 or targets.max() >= cx.n_points):
        raise ValueError("ray target must be a cloud point")
    origins = np.asarray(origins, dtype=np.float64)
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, (len(targets), 3))
    origins = np.ascontiguousarray(origins.reshape(-1, 3))
    if len(origins) != len(targets):
        raise ValueError("one origin per ray is required")
    if len(targets) == 0:
        return cx
    # sensors are few: locate each distinct origin once
    uniq, inv = np.unique(origins, axis=0, return_inverse=True)
    starts = cx.locate(uniq)[inv.reshape(-1)].astype(np.int64)
    skipped = _cast(cx.vertices, cx.tets, cx.neighbors, starts, origins, targets, cx.votes,
                    max(4 * cx.n_tets, 1000))
    cx.skipped_rays += int(skipped)
    cx.cast_rays += len(targets)
    if skipped:
        log.info("%d of %d rays skipped during traversal", skipped, len(targets))
    return cx


def vertex_tets(tets: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR incidence: tets around vertex v are ``idx[ptr[v]:ptr[v + 1]]``."""
    flat = tets.reshape(-1)
    order = np.argsort(flat, kind="stable")
    ptr = np.searchsorted(flat[order], np.arange(n_vertices + 1))
    return ptr.astype(np.int64), (order // 4).astype(np.int64)


@njit(cache=True)
def _vertex_ok(v, t, inF, tets, nbrs, vptr, vtets, ea, eb, n_points, seen, strict):
    """Would the boundary around vertex v stay a single fan with inF + {t} free?

    Boundary facets incident to v map to edges of v's link.  ``strict``
    requires the whole link to be one cycle (a closed disk around v).
    Otherwise facets with a sky corner, which never reach the output, are
    ignored and the remaining edges need only form one path or cycle.
    """
    ne = 0
    for k in range(vptr[v], vptr[v + 1]):
        T = vtets[k]
        if not (inF[T] or T == t):
            continue
        for f in range(4):
            if tets[T, f] == v:
                continue
            N = nbrs[T, f]
            if N >= 0 and (inF[N] or N == t):
                continue
            a = -1
            b = -1
            for q in range(4):
                if q == f:
                    continue
                w = tets[T, q]
                if w == v:
                    continue
                if a < 0:
                    a = w
                else:
                    b = w
            if not strict and (a >= n_points or b >= n_points):
                continue
            ea[ne] = a
            eb[ne] = b
            ne += 1
    if ne == 0:
        return True
    for i in range(ne):
        for side in range(2):
            end = ea[i] if side == 0 else eb[i]
            cnt = 0
            for j in range(ne):
                if ea[j] == end or eb[j] == end:
                    cnt += 1
            if cnt > 2 or (strict and cnt != 2):
                return False
    # connectivity by repeated sweeps from edge 0
    for i in range(ne):
        seen[i] = False
    seen[0] = True
    n_seen = 1
    changed = True
    while changed:
        changed = False
        for i in range(ne):
            if seen[i]:
                continue
            for j in range(ne):
                if seen[j] and (ea[i] == ea[j] or ea[i] == eb[j] or eb[i] == ea[j] or eb[i] == eb[j]):
                    seen[i] = True
                    n_seen += 1
                    changed = True
                    break
    return n_seen == ne


@njit(cache=True)
def _try_add(t, inF, tets, nbrs, vptr, vtets, ea, eb, n_points, seen, strict):
    for q in range(4):
        # sky corners carry no output faces, so their links are unconstrained
        if tets[t, q] >= n_points:
            continue
        if not _vertex_ok(tets[t, q], t, inF, tets, nbrs, vptr, vtets, ea, eb, n_points, seen, strict):
            return False
    inF[t] = True
    return True


@njit(cache=True)
def _grow_from(inF, candidate, votes, tets, nbrs, vptr, vtets, ea, eb, max_passes, n_points, seen, strict):
    n = len(tets)
    heap = [(np.int64(0), np.int64(0))]
    total = 0
    for _ in range(max_passes):
        # (re)queue every candidate touching the region; a cell rejected
        # earlier may pass once the region has grown around its vertices
        heap.clear()
        for t in range(n):
            if inF[t] or not candidate[t]:
                continue
            for f in range(4):
                nb = nbrs[t, f]
                if nb >= 0 and inF[nb]:
                    heap.append((-votes[t], np.int64(t)))
                    break
        heapq.heapify(heap)
        added = 0
        while len(heap) > 0:
            _, t = heapq.heappop(heap)
            if inF[t] or not _try_add(t, inF, tets, nbrs, vptr, vtets, ea, eb, n_points, seen, strict):
                continue
            added += 1
            for f in range(4):
                nb = nbrs[t, f]
                if nb >= 0 and candidate[nb] and not inF[nb]:
                    heapq.heappush(heap, (-votes[nb], nb))
        total += added
        if added == 0:
            break
    return total


@njit(cache=True)
def _grow(order, candidate, votes, tets, nbrs, vptr, vtets, max_inc, max_passes, n_points):
    """Grow from the best seed; reseed in disconnected candidate components."""
    n = len(tets)
    inF = np.zeros(n, dtype=np.bool_)
    ea = np.empty(3 * max_inc + 3, dtype=np.int64)
    eb = np.empty(3 * max_inc + 3, dtype=np.int64)
    seen = np.empty(3 * max_inc + 3, dtype=np.bool_)
    for s in order:
        if inF[s]:
            continue
        if not _try_add(s, inF, tets, nbrs, vptr, vtets, ea, eb, n_points, seen, True):
            continue
        _grow_from(inF, candidate, votes, tets, nbrs, vptr, vtets, ea, eb, max_passes, n_points, seen, True)
    # finishing pass: cells that only break the link through sky facets
    _grow_from(inF, candidate, votes, tets, nbrs, vptr, vtets, ea, eb, max_passes, n_points, seen, False)
    return inF


def grow_free_region(cx: TetrahedralComplex, k: int = 1, max_passes: int = 50) -> np.ndarray:
    """Manifold-preserving free set, grown from the highest-vote tetrahedron."""
    candidate = cx.votes >= k
    if not candidate.any():
        raise CarveError("no visibility evidence")
    # seeds in decreasing vote order (stable, so ties resolve by index)
    order = np.nonzero(candidate)[0]
    order = order[np.argsort(-cx.votes[order], kind="stable")]
    vptr, vtets = vertex_tets(cx.tets, len(cx.vertices))
    max_inc = int(np.diff(vptr).max())
    return _grow(order, candidate, cx.votes, cx.tets, cx.neighbors, vptr, vtets, max_inc, max_passes, cx.n_points)


def boundary_faces(cx: TetrahedralComplex, free: np.ndarray) -> np.ndarray:
    """Facets between free and non-free cells, wound so normals face the free side."""
    T, F = np.nonzero(free[:, None] & ~np.where(cx.neighbors >= 0, free[cx.neighbors], False))
    if len(T) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    others = (F[:, None] + np.arange(1, 4)[None]) % 4
    tri = cx.tets[T[:, None], others]
    apex = cx.tets[T, F]
    V = cx.vertices
    a, b, c = V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), V[apex] - a) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def label_and_extract(cx: TetrahedralComplex, k: int = 1, points=None) -> TriangleMesh:
    """Label free/matter cells and return the oriented boundary surface.

    Faces touching a sky corner are dropped, and vertices shared by several
    separate fans are split so the result is a 2-manifold (possibly with
    boundary).  ``points`` replaces the jittered positions in the output.
    """
    free = grow_free_region(cx, k)
    cx.free = free
    faces = boundary_faces(cx, free)
    faces = faces[(faces < cx.n_points).all(axis=1)]
    src = cx.vertices[: cx.n_points] if points is None else as_points(points)
    used, inv = np.unique(faces, return_inverse=True)
    V, F = split_fans(src[used], inv.reshape(-1, 3))
    mesh = TriangleMesh(V, F, manifold=True)
    log.info("carving: %d/%d tetrahedra free, %d faces", int(free.sum()), cx.n_tets, len(F))
    return mesh


def carve(points, origins, k: int = 1, seed: int = 0) -> tuple[TriangleMesh, TetrahedralComplex]:
    """Triangulate, cast one ray per point from its origin, and extract the surface."""
    pts = as_points(points)
    origins = np.asarray(origins, dtype=np.float64)
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, pts.shape)
    if len(pts) == 0:
        raise CarveError("no visibility evidence")
    cx = build_triangulation(pts, origins, seed=seed)
    cast_votes(cx, origins)
    return label_and_extract(cx, k, points=pts), cx


def merge_car_hulls(mesh: TriangleMesh, hulls: list[TriangleMesh]) -> TriangleMesh:
    """Disjoint union of the scene surface and the car hulls (no boolean operations)."""
    if not hulls:
        return mesh
    out = merge_meshes([mesh, *hulls])
    out.manifold = bool(mesh.manifold and all(h.manifold for h in hulls))
    return out
