"""PLY / OBJ reading and writing for meshes and point clouds."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .geometry import TriangleMesh


def write_ply_mesh(path, mesh: TriangleMesh, vertex_colors=None) -> None:
    """Binary little-endian PLY; optional per-vertex gray/RGB colours in [0, 1]."""
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if vertex_colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    verts = np.empty(mesh.n_vertices, dtype=fields)
    verts["x"], verts["y"], verts["z"] = mesh.vertices.T
    if vertex_colors is not None:
        c = np.asarray(vertex_colors, dtype=np.float64)
        if c.ndim == 1:
            c = np.repeat(c[:, None], 3, axis=1)
        c = np.clip(np.rint(c * 255), 0, 255).astype(np.uint8)
        verts["red"], verts["green"], verts["blue"] = c.T
    faces = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
    faces["vertex_indices"] = mesh.faces
    PlyData([PlyElement.describe(verts, "vertex"), PlyElement.describe(faces, "face")],
            text=False, byte_order="<").write(str(path))


def write_ply_points(path, points) -> None:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    verts = np.empty(len(p), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    verts["x"], verts["y"], verts["z"] = p.T
    PlyData([PlyElement.describe(verts, "vertex")], text=False, byte_order="<").write(str(path))


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    data = PlyData.read(str(path))
    v = data["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    faces = None
    if "face" in data:
        name = "vertex_indices" if "vertex_indices" in data["face"].data.dtype.names else "vertex_index"
        faces = np.stack(data["face"][name]).astype(np.int64).reshape(-1, 3)
    return pts, faces


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    pts, faces = read_ply(path)
    if faces is None:
        raise ValueError(f"{path} has no faces")
    return TriangleMesh(pts, faces)


def read_points(path) -> np.ndarray:
    """Point cloud from .ply, .npy, .bin (KITTI float32 x4) or whitespace text."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_ply(path)[0]
    if suffix == ".npy":
        return np.load(path).astype(np.float64)[:, :3]
    if suffix == ".bin":
        return np.fromfile(path, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)
    return np.loadtxt(path, dtype=np.float64, ndmin=2)[:, :3]


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
