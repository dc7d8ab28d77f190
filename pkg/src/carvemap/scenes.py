"""Mesh builders and ready-made synthetic scenes used by tests and ``carvemap synth``."""
from __future__ import annotations

import numpy as np

from .geometry import RigidTransform, TriangleMesh
from .ingest import Calibration, LidarModel, ProceduralTexture, SceneObject, SyntheticScene, Trajectory

# sensor frame (x fwd, y left, z up) -> camera frame (x right, y down, z fwd)
LIDAR_TO_CAM = RigidTransform(np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]))


def _orient(vertices, faces, wanted_normals):
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, wanted_normals) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _weld(vertices, faces, decimals=9):
    _, first, inv = np.unique(np.round(vertices, decimals), axis=0, return_index=True, return_inverse=True)
    return vertices[first], inv.reshape(-1)[faces]


def checker_albedo(cell_ids: np.ndarray, rng: np.random.Generator, noise: float = 0.15) -> np.ndarray:
    """Checkerboard of 0.3 / 0.7 per grid cell plus uniform per-face noise."""
    base = np.where(np.asarray(cell_ids) % 2 == 0, 0.3, 0.7)
    return np.clip(base + rng.uniform(-noise, noise, size=len(base)), 0.05, 0.95)


def grid_box(lo, hi, cell: float = 0.5, inward: bool = False, rng=None, albedo=None) -> TriangleMesh:
    """Closed box whose sides are split into a grid no coarser than ``cell``.

    Every side uses the same tick positions along a shared axis, so welding
    the sides produces a closed manifold surface.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ticks = [np.linspace(lo[k], hi[k], max(1, int(np.ceil((hi[k] - lo[k]) / cell - 1e-9))) + 1) for k in range(3)]
    verts, faces, normals, cells = [], [], [], []
    base = 0
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for side, value in ((-1, lo[axis]), (1, hi[axis])):
            A, B = np.meshgrid(ticks[a], ticks[b], indexing="ij")
            P = np.zeros(A.shape + (3,))
            P[..., axis] = value
            P[..., a], P[..., b] = A, B
            na, nb = A.shape
            idx = base + np.arange(na * nb).reshape(na, nb)
            i0, i1 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            i2, i3 = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            ci, cj = np.meshgrid(np.arange(na - 1), np.arange(nb - 1), indexing="ij")
            cid = (ci + cj).ravel()
            faces += [np.stack([i0, i1, i2], 1), np.stack([i0, i2, i3], 1)]
            cells += [cid, cid]
            n = np.zeros(3)
            n[axis] = side * (-1 if inward else 1)
            normals.append(np.repeat(n[None], 2 * len(i0), axis=0))
            verts.append(P.reshape(-1, 3))
            base += na * nb
    V, F = _weld(np.concatenate(verts), np.concatenate(faces))
    F = _orient(V, F, np.concatenate(normals))
    if albedo is None:
        albedo = checker_albedo(np.concatenate(cells), rng or np.random.default_rng(0))
    return TriangleMesh(V, F, manifold=True, albedo=np.broadcast_to(albedo, (len(F),)).astype(float))


def plane_mesh(lo, hi, z: float = 0.0, cell: float = 0.5, rng=None) -> TriangleMesh:
    """Open horizontal sheet over ``[lo, hi]`` in xy with upward normals."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    xs = np.linspace(lo[0], hi[0], max(1, int(np.ceil((hi[0] - lo[0]) / cell))) + 1)
    ys = np.linspace(lo[1], hi[1], max(1, int(np.ceil((hi[1] - lo[1]) / cell))) + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    V = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], 1)
    idx = np.arange(X.size).reshape(X.shape)
    i0, i1, i2, i3 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    F = np.concatenate([np.stack([i0, i1, i2], 1), np.stack([i0, i2, i3], 1)])
    ci, cj = np.meshgrid(np.arange(len(xs) - 1), np.arange(len(ys) - 1), indexing="ij")
    cid = np.tile((ci + cj).ravel(), 2)
    return TriangleMesh(V, F, manifold=True, albedo=checker_albedo(cid, rng or np.random.default_rng(0)))


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0, 0, 0), albedo=None, rng=None) -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    V = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    F = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = V[uniq[:, 0]] + V[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(V) + inv.reshape(3, -1)  # midpoints of edges (01, 12, 20) per face
        a, b, c = F.T
        F = np.concatenate([np.stack([a, m[0], m[2]], 1), np.stack([b, m[1], m[0]], 1),
                            np.stack([c, m[2], m[1]], 1), np.stack([m[0], m[1], m[2]], 1)])
        V = np.concatenate([V, mid])
    F = _orient(V, F, V[F].mean(axis=1))
    if albedo is None:
        rng = rng or np.random.default_rng(1)
        albedo = np.clip(0.5 + 0.3 * np.sign(np.sin(6 * np.arctan2(V[F][:, :, 1].mean(1), V[F][:, :, 0].mean(1))))
                         + rng.uniform(-0.1, 0.1, len(F)), 0.05, 0.95)
    return TriangleMesh(V * radius + np.asarray(center, float), F, manifold=True,
                        albedo=np.broadcast_to(albedo, (len(F),)).astype(float))


def car_mesh(length: float = 4.4, width: float = 1.8, height: float = 1.5, shoulder: float = 0.55,
             ramp: float = 1.1, rng=None) -> TriangleMesh:
    """Closed car-like prism: a trapezoid side profile extruded across the width.

    The profile rises from ``shoulder`` to ``height`` over ``ramp`` metres at
    both ends.  Local frame: x along the length, y across, z up, centred on
    the footprint with the wheels at z = 0.
    """
    L, W = length, width
    prof = np.array([[0, 0], [L, 0], [L, shoulder], [L - ramp, height], [ramp, height], [0, shoulder]], float)
    prof[:, 0] -= L / 2
    n = len(prof)
    V = np.concatenate([np.column_stack([prof[:, 0], np.full(n, -W / 2), prof[:, 1]]),
                        np.column_stack([prof[:, 0], np.full(n, W / 2), prof[:, 1]]),
                        [[0, -W / 2, prof[:, 1].mean()], [0, W / 2, prof[:, 1].mean()]]])
    F = []
    for k in range(n):
        j = (k + 1) % n
        F += [[k, j, n + j], [k, n + j, n + k]]           # side quad
        F += [[2 * n, j, k], [2 * n + 1, n + k, n + j]]   # caps as fans
    F = np.array(F)
    F = _orient(V, F, V[F].mean(axis=1) - np.array([0, 0, prof[:, 1].mean()]))
    rng = rng or np.random.default_rng(2)
    return TriangleMesh(V, F, manifold=True, albedo=rng.uniform(0.1, 0.9, len(F)))


def tree_mesh(height: float = 3.0, crown_radius: float = 0.8, trunk: float = 0.3) -> TriangleMesh:
    from .geometry import merge_meshes

    trunk_top = height - 2 * crown_radius + 0.2
    t = grid_box([-trunk / 2, -trunk / 2, 0], [trunk / 2, trunk / 2, trunk_top], cell=1.0)
    crown = icosphere(crown_radius, 2, (0, 0, height - crown_radius))
    return merge_meshes([t, crown])


def place(mesh: TriangleMesh, x: float, y: float, yaw: float = 0.0, z: float = 0.0) -> TriangleMesh:
    return mesh.transformed(RigidTransform.from_rotvec([0, 0, yaw], [x, y, z]))


def default_camera(width: int = 640, height: int = 480, f: float = 500.0) -> Calibration:
    return Calibration(f, f, (width - 1) / 2, (height - 1) / 2, width, height, LIDAR_TO_CAM)


def sensor_path(start, end, timesteps: int, z: float = 1.7) -> Trajectory:
    s = np.array([start[0], start[1], z], float)
    e = np.array([end[0], end[1], z], float)
    return Trajectory.linear(s, e, 0.0, float(max(timesteps - 1, 1)))


def room_scene(timesteps: int = 5, with_cars: bool = True, with_mover: bool = True,
               lidar: LidarModel | None = None, seed: int = 0, textured: bool = True) -> SyntheticScene:
    """16 x 10 x 4 m room, two parked cars and a sphere crossing the sensor path.

    With ``textured`` the renders use a smooth procedural texture instead of
    the flat per-face checker albedo.
    """
    rng = np.random.default_rng(seed)
    objects = [SceneObject(grid_box([-8, -5, 0], [8, 5, 4], cell=0.5, inward=True, rng=rng), "room")]
    if with_cars:
        objects.append(SceneObject(place(car_mesh(rng=rng), -3.5, -3.0, 0.05), "car0", is_car=True))
        objects.append(SceneObject(place(car_mesh(4.0, 1.7, 1.45, rng=rng), 4.0, 3.0, -0.1), "car1", is_car=True))
    if with_mover:
        ball = icosphere(0.7, 3, (0, 0, 0), rng=rng)
        traj = Trajectory.linear([2.5, -3.2, 1.0], [2.5, 3.2, 1.0], 0.0, float(max(timesteps - 1, 1)))
        objects.append(SceneObject(ball, "ball", traj))
    return SyntheticScene(objects, sensor_path((-2.0, 0.0), (1.0, 0.0), timesteps), timesteps,
                          lidar or LidarModel(), default_camera(),
                          ProceduralTexture(seed) if textured else None)


def crossing_sphere_scene(timesteps: int = 5, lidar: LidarModel | None = None, seed: int = 0) -> SyntheticScene:
    """Street-like layout: ground plane, a facade ahead and a sphere crossing in between."""
    rng = np.random.default_rng(seed)
    ground = plane_mesh([-20, -20], [20, 20], 0.0, cell=1.0, rng=rng)
    facade = grid_box([12, -15, 0], [13, 15, 6], cell=1.0, rng=rng)
    ball = icosphere(0.8, 3, rng=rng)
    traj = Trajectory.linear([6.0, -4.0, 1.0], [6.0, 4.0, 1.0], 0.0, float(max(timesteps - 1, 1)))
    objects = [SceneObject(ground, "ground"), SceneObject(facade, "facade"), SceneObject(ball, "ball", traj)]
    return SyntheticScene(objects, sensor_path((0.0, 0.0), (1.0, 0.0), timesteps), timesteps,
                          lidar or LidarModel(), default_camera())


def street_scene(timesteps: int = 3, lidar: LidarModel | None = None, seed: int = 0) -> SyntheticScene:
    """Ground plane with two cars, a tree and a long low wall (car-detection fixture)."""
    rng = np.random.default_rng(seed)
    objects = [
        SceneObject(plane_mesh([-25, -25], [25, 25], 0.0, cell=1.0, rng=rng), "ground"),
        SceneObject(place(car_mesh(rng=rng), 6.0, -4.0, 0.0), "car0", is_car=True),
        SceneObject(place(car_mesh(4.0, 1.7, 1.45, rng=rng), -5.0, 4.5, 0.4), "car1", is_car=True),
        SceneObject(place(tree_mesh(), 3.0, 6.0), "tree"),
        SceneObject(grid_box([-6, -7.5, 0], [6, -6.5, 1.0], cell=1.0, rng=rng), "wall"),
    ]
    return SyntheticScene(objects, sensor_path((-1.0, 0.0), (1.0, 0.0), timesteps), timesteps,
                          lidar or LidarModel(elevation_min_deg=-30, elevation_max_deg=15, n_azimuth=900,
                                              n_elevation=64), default_camera())


SCENES = {"room": room_scene, "crossing": crossing_sphere_scene, "street": street_scene}
