"""Z-buffer rasterisation of triangle meshes into pinhole cameras.

Every covered pixel centre is intersected exactly with its triangle (ray /
triangle test in the camera frame), so depth and barycentric coordinates are
the true ray hit, not perspective-interpolated estimates.  Triangles that
straddle the camera plane are handled by scanning the whole frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import CameraView, TriangleMesh

NEAR = 1e-6
EDGE_EPS = 1e-9  # closes cracks along shared edges


@dataclass
class RenderBuffers:
    depth: np.ndarray  # (H, W) camera z of the hit, inf where empty
    face: np.ndarray   # (H, W) face index, -1 where empty
    bary: np.ndarray   # (H, W, 3) barycentric coordinates of the hit

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0


@numba.njit(cache=True)
def _rasterize(vc, faces, fx, fy, cx, cy, W, H, near):
    depth = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay, az = vc[i0, 0], vc[i0, 1], vc[i0, 2]
        bx, by, bz = vc[i1, 0], vc[i1, 1], vc[i1, 2]
        qx, qy, qz = vc[i2, 0], vc[i2, 1], vc[i2, 2]
        if az <= near and bz <= near and qz <= near:
            continue
        if az > near and bz > near and qz > near:
            ua, va = fx * ax / az + cx, fy * ay / az + cy
            ub, vb = fx * bx / bz + cx, fy * by / bz + cy
            uq, vq = fx * qx / qz + cx, fy * qy / qz + cy
            u0 = max(0, int(np.floor(min(ua, ub, uq))))
            u1 = min(W - 1, int(np.ceil(max(ua, ub, uq))))
            v0 = max(0, int(np.floor(min(va, vb, vq))))
            v1 = min(H - 1, int(np.ceil(max(va, vb, vq))))
        else:
            u0, u1, v0, v1 = 0, W - 1, 0, H - 1
        if u0 > u1 or v0 > v1:
            continue
        e1x, e1y, e1z = bx - ax, by - ay, bz - az
        e2x, e2y, e2z = qx - ax, qy - ay, qz - az
        # ray origin is the camera centre (0, 0, 0)
        tx, ty, tz = -ax, -ay, -az
        qvx = ty * e1z - tz * e1y
        qvy = tz * e1x - tx * e1z
        qvz = tx * e1y - ty * e1x
        t_num = e2x * qvx + e2y * qvy + e2z * qvz
        for v in range(v0, v1 + 1):
            dy = (v - cy) / fy
            for u in range(u0, u1 + 1):
                dx = (u - cx) / fx
                px = dy * e2z - e2y
                py = e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < 1e-300:
                    continue
                inv = 1.0 / det
                bu = (tx * px + ty * py + tz * pz) * inv
                if bu < -EDGE_EPS or bu > 1.0 + EDGE_EPS:
                    continue
                bv = (dx * qvx + dy * qvy + qvz) * inv
                if bv < -EDGE_EPS or bu + bv > 1.0 + EDGE_EPS:
                    continue
                t = t_num * inv
                if t > near and t < depth[v, u]:
                    depth[v, u] = t
                    fid[v, u] = f
                    bary[v, u, 0] = 1.0 - bu - bv
                    bary[v, u, 1] = bu
                    bary[v, u, 2] = bv
    return depth, fid, bary


def rasterize(mesh: TriangleMesh, view: CameraView) -> RenderBuffers:
    vc = np.ascontiguousarray(view.pose.apply(mesh.vertices))
    depth, fid, bary = _rasterize(vc, np.ascontiguousarray(mesh.faces), float(view.fx),
                                  float(view.fy), float(view.cx), float(view.cy),
                                  int(view.width), int(view.height), NEAR)
    return RenderBuffers(depth, fid, bary)


def pixel_rays(view: CameraView, uv: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z component for pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    return np.stack([(uv[:, 0] - view.cx) / view.fx, (uv[:, 1] - view.cy) / view.fy,
                     np.ones(len(uv))], axis=1)


def pixel_grid(view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:view.height, 0:view.width]
    return u, v


def hit_points(mesh: TriangleMesh, buffers: RenderBuffers) -> np.ndarray:
    """World positions of covered pixels, shape (H, W, 3), NaN where empty."""
    out = np.full(buffers.bary.shape, np.nan)
    m = buffers.covered
    tri = mesh.vertices[mesh.faces[buffers.face[m]]]
    out[m] = np.einsum("nk,nkj->nj", buffers.bary[m], tri)
    return out


def visible_from(view: CameraView, mesh: TriangleMesh, buffers: RenderBuffers, points,
                 point_faces, tol: float = 1e-3, rel_tol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Occlusion test of surface points against a rendered view.

    A point is visible when it projects inside the frame and the surface seen
    at its projection is either its own face or lies no nearer than the point
    (within ``tol + rel_tol * depth``).  The surface depth is evaluated on the
    plane of the face stored at the nearest pixel, along the exact ray through
    the projection.  Returns ``(visible, uv)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    point_faces = np.asarray(point_faces, dtype=np.int64).reshape(-1)
    uv, z = view.project_points(points)
    ok = z > NEAR
    ok &= (uv[:, 0] >= -0.5) & (uv[:, 0] < view.width - 0.5)
    ok &= (uv[:, 1] >= -0.5) & (uv[:, 1] < view.height - 0.5)
    visible = np.zeros(len(points), dtype=bool)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return visible, uv
    pu = np.clip(np.rint(uv[idx, 0]).astype(np.int64), 0, view.width - 1)
    pv = np.clip(np.rint(uv[idx, 1]).astype(np.int64), 0, view.height - 1)
    seen = buffers.face[pv, pu]
    own = (seen == point_faces[idx]) | (seen < 0)
    visible[idx[own]] = True
    other = idx[~own]
    if len(other):
        sf = seen[~own]
        tri = view.pose.apply(mesh.vertices[mesh.faces[sf]].reshape(-1, 3)).reshape(-1, 3, 3)
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        r = pixel_rays(view, uv[other])
        num = np.einsum("ij,ij->i", n, tri[:, 0])
        den = np.einsum("ij,ij->i", n, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            z_surf = np.where(np.abs(den) > 1e-300, num / den, np.inf)
        z_surf = np.where(z_surf > NEAR, z_surf, np.inf)
        zp = z[other]
        visible[other] = zp <= z_surf + tol + rel_tol * zp
    return visible, uv


def adjacent_seen(mesh: TriangleMesh, bj: RenderBuffers, own: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Does view j see, at the projected pixel, a face sharing a vertex with the point's face?

    Near an edge the depth test compares against the neighbour's plane,
    which passes in front of the point on convex folds; adjacent faces
    cannot hide the point, so they count as visible.
    """
    out = np.zeros(len(own), dtype=bool)
    good = np.isfinite(uv).all(axis=1)
    H, W = bj.face.shape
    pu = np.clip(np.rint(uv[good, 0]).astype(np.int64), 0, W - 1)
    pv = np.clip(np.rint(uv[good, 1]).astype(np.int64), 0, H - 1)
    seen = bj.face[pv, pu]
    hit = seen >= 0
    Fo = mesh.faces[own[good][hit]]
    Fs = mesh.faces[seen[hit]]
    share = (Fo[:, :, None] == Fs[:, None, :]).any(axis=(1, 2))
    idx = np.flatnonzero(good)[hit]
    out[idx] = share
    return out


def bilinear(image: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples and their exact (u, v) derivatives.

    ``uv`` must lie in ``[0, W-1] x [0, H-1]``.  Returns ``(values, grad)``
    with grad of shape (N, 2) = (dI/du, dI/dv) of the interpolant.
    """
    H, W = image.shape
    u = np.asarray(uv[:, 0], dtype=np.float64)
    v = np.asarray(uv[:, 1], dtype=np.float64)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = u - u0
    b = v - v0
    I00 = image[v0, u0]
    I10 = image[v0, u1]
    I01 = image[v1, u0]
    I11 = image[v1, u1]
    val = (1 - a) * (1 - b) * I00 + a * (1 - b) * I10 + (1 - a) * b * I01 + a * b * I11
    gu = (1 - b) * (I10 - I00) + b * (I11 - I01)
    gv = (1 - a) * (I01 - I00) + a * (I11 - I10)
    return val, np.stack([gu, gv], axis=1)


def in_frame(view: CameraView, uv: np.ndarray) -> np.ndarray:
    """Sample positions usable by :func:`bilinear`."""
    return ((uv[:, 0] >= 0) & (uv[:, 0] <= view.width - 1)
            & (uv[:, 1] >= 0) & (uv[:, 1] <= view.height - 1))
