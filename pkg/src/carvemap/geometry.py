"""Shared geometric types and predicates.

Points are plain ``(3,)`` / ``(N, 3)`` float64 arrays, images are ``(H, W)``
float arrays in [0, 1] and masks are ``(H, W)`` bool arrays.  The few types
that carry invariants (rigid transforms, cameras, meshes) are dataclasses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEGENERATE_AREA = 1e-12


class GeometryError(ValueError):
    """Invalid geometric input (degenerate face, depth behind camera, ...)."""


def as_points(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


def as_gray_image(img) -> np.ndarray:
    """Validate a grayscale image, converting 8-bit input to [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("image intensities must be finite and within [0, 1]")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("rigid transform must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m, orthonormalize: bool = False) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (12,):
            m = m.reshape(3, 4)
        R = m[:3, :3]
        if orthonormalize:
            # only repairs rounding from text files, not reflections or shears
            if np.abs(R @ R.T - np.eye(3)).max() > 1e-3 or np.linalg.det(R) <= 0:
                raise ValueError("matrix is not close to a rotation")
            u, _, vt = np.linalg.svd(R)
            R = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
        return cls(R, m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass
class CameraView:
    """Pinhole camera.  ``pose`` maps world coordinates into the camera frame.

    Pixel centres sit at integer coordinates: pixel ``(u, v)`` is column ``u``,
    row ``v`` of ``image``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)
    image: np.ndarray | None = None
    moving_mask: np.ndarray | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.image is not None:
            self.image = as_gray_image(self.image)
            if self.image.shape != (self.height, self.width):
                raise ValueError("image shape does not match camera size")
        if self.moving_mask is not None:
            self.moving_mask = np.asarray(self.moving_mask, dtype=bool)
            if self.moving_mask.shape != (self.height, self.width):
                raise ValueError("mask shape does not match camera size")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    def with_pose(self, pose: RigidTransform) -> "CameraView":
        return CameraView(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          pose, self.image, self.moving_mask, self.timestamp)

    def project_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection.  Returns ``(uv, depth)``; uv is NaN where depth <= 0."""
        pc = self.pose.apply(as_points(points))
        z = pc[:, 2]
        uv = np.full((len(pc), 2), np.nan)
        front = z > 0
        uv[front, 0] = self.fx * pc[front, 0] / z[front] + self.cx
        uv[front, 1] = self.fy * pc[front, 1] / z[front] + self.cy
        return uv, z


def project(view: CameraView, p) -> tuple[float, float] | None:
    """Project a world point; ``None`` means the point is behind the camera."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    X, Y, Z = view.pose.apply(p)
    if Z <= 0:
        return None
    return (view.fx * X / Z + view.cx, view.fy * Y / Z + view.cy)


def projection_jacobian(view: CameraView, p) -> np.ndarray:
    """Derivative of :func:`project` with respect to the world point, shape (2, 3)."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    X, Y, Z = view.pose.apply(p)
    if Z <= 1e-9:
        raise GeometryError(f"degenerate depth {Z!r} for projection jacobian")
    dcam = np.array([[view.fx / Z, 0.0, -view.fx * X / Z**2],
                     [0.0, view.fy / Z, -view.fy * Y / Z**2]])
    return dcam @ view.pose.rotation


def projection_jacobians(view: CameraView, points) -> np.ndarray:
    """Batched :func:`projection_jacobian`, shape (N, 2, 3); no depth check."""
    pc = view.pose.apply(as_points(points))
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    J = np.zeros((len(pc), 2, 3))
    J[:, 0, 0] = view.fx / Z
    J[:, 0, 2] = -view.fx * X / Z**2
    J[:, 1, 1] = view.fy / Z
    J[:, 1, 2] = -view.fy * Y / Z**2
    return J @ view.pose.rotation


def triangle_normal(a, b, c) -> np.ndarray:
    n = np.cross(np.asarray(b, float) - a, np.asarray(c, float) - a)
    norm = np.linalg.norm(n)
    if 0.5 * norm < DEGENERATE_AREA:
        raise GeometryError("degenerate triangle")
    return n / norm


def closest_point_on_triangle(p, a, b, c) -> np.ndarray:
    """Closest point of the closed triangle ``abc`` to ``p``.

    All arguments broadcast against each other with a trailing axis of 3.
    Region classification follows the usual Voronoi-region walk (vertex,
    edge, then face regions).
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    shape = p.shape
    p, a, b, c = (x.reshape(-1, 3) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out.reshape(shape)


def point_to_triangle_distance(p, triangle) -> float | np.ndarray:
    """Euclidean distance from ``p`` to the closed triangle ``(a, b, c)``."""
    a, b, c = (np.asarray(v, dtype=np.float64) for v in triangle)
    p = np.asarray(p, dtype=np.float64)
    q = closest_point_on_triangle(p, a, b, c)
    d = np.linalg.norm(p - q, axis=-1)
    return float(d) if d.ndim == 0 else d


@dataclass
class TriangleMesh:
    """Indexed triangle mesh.

    ``albedo`` is an optional per-face scalar used by synthetic scenes.  The
    mesh may be mutated in place (``vertices`` only); connectivity-derived
    caches stay valid because faces never change after construction.
    """

    vertices: np.ndarray
    faces: np.ndarray
    manifold: bool = False
    albedo: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.albedo is not None:
            self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1)
            if len(self.albedo) != len(self.faces):
                raise ValueError("albedo must have one value per face")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), self.manifold,
                            None if self.albedo is None else self.albedo.copy())

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.faces.copy(), self.manifold,
                            None if self.albedo is None else self.albedo.copy())

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        n = self.face_cross()
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(norm > 0, n / norm, 0.0)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, renormalised."""
        cross = self.face_cross()  # |cross| = 2 * area, direction = normal
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], cross)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(norm > 0, vn / norm, 0.0)

    def degenerate_faces(self) -> np.ndarray:
        return self.face_areas() < DEGENERATE_AREA

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape (E, 2), sorted per row."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def one_ring(self) -> list[np.ndarray]:
        """Neighbour vertex indices for every vertex."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(self.n_vertices + 1))
        return [both[splits[i]:splits[i + 1], 1] for i in range(self.n_vertices)]

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(self.edges) + len(self.faces)

    def is_closed(self) -> bool:
        _, counts = edge_face_counts(self.faces)
        return bool(len(counts)) and bool(np.all(counts == 2))

    def check_manifold(self) -> bool:
        return is_manifold(self.faces)


def face_normal(mesh: TriangleMesh, face: int) -> np.ndarray:
    a, b, c = mesh.vertices[mesh.faces[face]]
    return triangle_normal(a, b, c)


def surface_point(mesh: TriangleMesh, face: int, bary) -> tuple[np.ndarray, np.ndarray]:
    """Position and unit normal of the point with barycentric ``bary`` on ``face``."""
    bary = np.asarray(bary, dtype=np.float64)
    if np.any(bary < -1e-12) or abs(bary.sum() - 1.0) > 1e-9:
        raise ValueError("barycentric coordinates must be non-negative and sum to 1")
    tri = mesh.vertices[mesh.faces[face]]
    return bary @ tri, face_normal(mesh, face)


def edge_face_counts(faces) -> tuple[np.ndarray, np.ndarray]:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0, return_counts=True)


def corner_fans(faces) -> np.ndarray:
    """Fan id of every face corner, shape (F, 3).

    Two corners of the same vertex share a fan when their faces are linked
    through a chain of faces sharing edges incident to that vertex.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    F = len(faces)
    if F == 0:
        return np.zeros((0, 3), dtype=np.int64)
    corner_v = faces.reshape(-1)
    # every corner (v at face f) touches two edges: (v, next) and (v, prev)
    nxt = faces[:, [1, 2, 0]].reshape(-1)
    prv = faces[:, [2, 0, 1]].reshape(-1)
    node = np.arange(3 * F)
    keys_v = np.concatenate([corner_v, corner_v])
    keys_o = np.concatenate([nxt, prv])
    nodes = np.concatenate([node, node])
    order = np.lexsort((keys_o, keys_v))
    kv, ko, nd = keys_v[order], keys_o[order], nodes[order]
    same = (kv[1:] == kv[:-1]) & (ko[1:] == ko[:-1])
    rows, cols = nd[1:][same], nd[:-1][same]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(3 * F, 3 * F))
    _, comp = connected_components(graph, directed=False)
    return comp.reshape(F, 3)


def vertex_fan_counts(faces) -> np.ndarray:
    """Number of edge-connected face fans around each referenced vertex.

    Returns an array indexed by vertex id (0 for unreferenced vertices).
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros(0, dtype=np.int64)
    comp = corner_fans(faces).reshape(-1)
    pairs = np.unique(np.stack([faces.reshape(-1), comp], axis=1), axis=0)
    return np.bincount(pairs[:, 0], minlength=int(faces.max()) + 1)


def split_fans(vertices, faces) -> tuple[np.ndarray, np.ndarray]:
    """Duplicate every vertex once per fan so that bow-tie vertices become regular."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.asarray(vertices), faces
    comp = corner_fans(faces).reshape(-1)
    key = np.stack([faces.reshape(-1), comp], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    return np.asarray(vertices)[uniq[:, 0]], inv.reshape(-1, 3)


def is_manifold(faces) -> bool:
    """Edge-fan manifold test: each edge bounds 1 or 2 faces and each vertex has one fan."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return True
    if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
        return False
    _, counts = edge_face_counts(faces)
    if np.any(counts > 2):
        return False
    fans = vertex_fan_counts(faces)
    used = np.unique(faces)
    return bool(np.all(fans[used] == 1))


def box_mesh(lo, hi, inward: bool = False) -> TriangleMesh:
    """Closed axis-aligned box with 12 faces (outward normals unless ``inward``)."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    v = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    f = np.array([
        [0, 2, 1], [1, 2, 3],  # z = lo
        [4, 5, 6], [5, 7, 6],  # z = hi
        [0, 1, 4], [1, 5, 4],  # y = lo
        [2, 6, 3], [3, 6, 7],  # y = hi
        [0, 4, 2], [2, 4, 6],  # x = lo
        [1, 3, 5], [3, 7, 5],  # x = hi
    ])
    if inward:
        f = f[:, ::-1]
    return TriangleMesh(v, f, manifold=True)


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    """Disjoint union with re-based vertex indices."""
    verts, faces, albedo = [], [], []
    offset = 0
    manifold = True
    has_albedo = bool(meshes) and all(m.albedo is not None for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
        manifold = manifold and m.manifold
        if has_albedo:
            albedo.append(m.albedo)
    if not meshes:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), manifold=True)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), manifold,
                        np.concatenate(albedo) if has_albedo else None)
