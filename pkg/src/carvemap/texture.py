"""Incremental view-weighted texturing on per-face texel grids.

Every face owns an ``r x r`` grid of texels laid out on a barycentric
lattice: texel ``(i, j)`` sits at barycentric ``(1 - s - t, s, t)`` with
``s = i / (r - 1)``, ``t = j / (r - 1)``.  Texels with ``i + j > r - 1`` fall
outside the triangle; they are clamped onto the opposite edge and act as a
gutter for bilinear lookups in the packed atlas.

Each texel keeps a running colour ``C`` and weight ``W``.  A view with weight
``w`` (the clamped cosine between the surface normal and the direction to
the camera) contributes with weight ``w**alpha``, so the final colour is the
weighted mean of all contributions regardless of view order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraView, TriangleMesh
from .raster import RenderBuffers, adjacent_seen, bilinear, in_frame, rasterize, visible_from

log = logging.getLogger(__name__)

ALPHA = 8.0
TEXELS = 8
NEUTRAL = 0.5
VISIBILITY_TOL = 1e-3


@dataclass
class BlendState:
    """Running colour ``C``, accumulated weight ``W`` and contribution count ``n``.

    Fields may be scalars or arrays of matching shape.
    """

    C: np.ndarray
    W: np.ndarray
    n: np.ndarray

    @classmethod
    def empty(cls, shape=()) -> "BlendState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int64))

    def copy(self) -> "BlendState":
        return BlendState(np.array(self.C, copy=True), np.array(self.W, copy=True),
                          np.array(self.n, copy=True))


def accumulate(state: BlendState, c, w, alpha: float = ALPHA) -> BlendState:
    """Fold one colour sample ``c`` with view weight ``w`` into ``state``.

    Returns a new state; zero weights (including ``w**alpha`` underflowing
    to zero) leave the corresponding entries untouched.
    """
    c = np.asarray(c, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("weights must lie in [0, 1]")
    wa = w ** alpha
    C = np.asarray(state.C, dtype=np.float64)
    W = np.asarray(state.W, dtype=np.float64)
    n = np.asarray(state.n)
    W_new = W + wa
    use = wa > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        C_new = np.where(use, (W * C + wa * c) / np.where(use, W_new, 1.0), C)
    return BlendState(C_new, np.where(use, W_new, W), n + use)


def view_weight(points, normals, view: CameraView) -> np.ndarray:
    """Clamped cosine between unit normals and the point-to-camera direction.

    ``w = max(0, -(x - c) / |x - c| . n)``: 1 when the camera sits on the
    normal axis, 0 for back-facing surfaces.
    """
    x = np.asarray(points, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    d = x - view.center
    dist = np.linalg.norm(d, axis=-1)
    if np.any(dist == 0):
        raise ValueError("surface point coincides with the camera centre")
    return np.clip(-np.sum(d * n, axis=-1) / dist, 0.0, 1.0)


def lattice(r: int) -> np.ndarray:
    """Barycentric coordinates of the ``r x r`` texels, shape (r, r, 3), indexed [i, j]."""
    if r < 2:
        raise ValueError("texel resolution must be at least 2")
    i, j = np.meshgrid(np.arange(r, dtype=np.float64), np.arange(r, dtype=np.float64), indexing="ij")
    s, t = i / (r - 1), j / (r - 1)
    excess = np.maximum(s + t - 1.0, 0.0) / 2  # gutter texels: project onto the s + t = 1 edge
    s, t = s - excess, t - excess
    return np.stack([1.0 - s - t, s, t], axis=-1)


def inside_mask(r: int) -> np.ndarray:
    """Texels lying on the triangle itself (not in the gutter)."""
    i, j = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    return i + j <= r - 1


@dataclass
class TextureAtlas:
    """Per-face texel grids and their blend state, shape (faces, r, r)."""

    n_faces: int
    r: int = TEXELS
    alpha: float = ALPHA
    state: BlendState | None = None
    passes: int = 0

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("texel resolution must be at least 2")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.state is None:
            self.state = BlendState.empty((self.n_faces, self.r, self.r))

    @classmethod
    def for_mesh(cls, mesh: TriangleMesh, r: int = TEXELS, alpha: float = ALPHA) -> "TextureAtlas":
        return cls(mesh.n_faces, r, alpha)

    @property
    def filled(self) -> np.ndarray:
        return self.state.n > 0

    def texel_points(self, mesh: TriangleMesh) -> np.ndarray:
        tri = mesh.triangles()
        return np.einsum("ijk,fkd->fijd", lattice(self.r), tri)


def texture_pass(atlas: TextureAtlas, mesh: TriangleMesh, view: CameraView,
                 buffers: RenderBuffers | None = None) -> TextureAtlas:
    """Blend one view into the atlas in place and return it.

    A texel receives a contribution when its surface point is visible in the
    view (z-buffer test with 1 mm tolerance), projects inside the frame onto
    a pixel outside the moving mask, and faces the camera.
    """
    if view.image is None:
        raise ValueError("view has no image")
    if view.moving_mask is None:
        raise ValueError("view has no moving mask")
    if mesh.n_faces != atlas.n_faces:
        raise ValueError("atlas was built for a different mesh")
    r = atlas.r
    if mesh.n_faces == 0:
        atlas.passes += 1
        return atlas
    buffers = buffers if buffers is not None else rasterize(mesh, view)
    X = atlas.texel_points(mesh).reshape(-1, 3)
    own = np.repeat(np.arange(mesh.n_faces), r * r)
    normals = mesh.face_normals()[own]
    vis, uv = visible_from(view, mesh, buffers, X, own, tol=VISIBILITY_TOL)
    ok = np.isfinite(uv).all(axis=1)
    vis |= ok & adjacent_seen(mesh, buffers, own, uv)
    ok &= vis
    ok[ok] = in_frame(view, uv[ok])
    px = np.rint(uv[ok]).astype(np.int64)
    ok[ok] = ~view.moving_mask[px[:, 1], px[:, 0]]
    idx = np.flatnonzero(ok)
    w = np.zeros(len(X))
    if len(idx):
        w[idx] = view_weight(X[idx], normals[idx], view)
    idx = idx[w[idx] > 0]
    c = np.zeros(len(X))
    c[idx], _ = bilinear(view.image, uv[idx])
    st = atlas.state
    C, Wt, n = st.C.reshape(-1).copy(), st.W.reshape(-1).copy(), st.n.reshape(-1).copy()
    sub = accumulate(BlendState(C[idx], Wt[idx], n[idx]), c[idx], w[idx], atlas.alpha)
    C[idx], Wt[idx], n[idx] = sub.C, sub.W, sub.n
    shape = st.C.shape
    atlas.state = BlendState(C.reshape(shape), Wt.reshape(shape), n.reshape(shape))
    atlas.passes += 1
    log.debug("texture pass %d: %d texels updated", atlas.passes, len(idx))
    return atlas


def texture_mesh(mesh: TriangleMesh, views, r: int = TEXELS, alpha: float = ALPHA) -> TextureAtlas:
    """Run :func:`texture_pass` for every view in order."""
    atlas = TextureAtlas.for_mesh(mesh, r, alpha)
    for view in views:
        texture_pass(atlas, mesh, view)
    return atlas


def _pow2(x: int) -> int:
    return 1 << max(int(x) - 1, 0).bit_length()


def atlas_layout(n_faces: int, r: int) -> tuple[int, int, int]:
    """Smallest power-of-two ``(width, height)`` holding ``n_faces`` r x r charts in rows.

    Returns ``(width, height, columns)``.  Ties prefer the squarer image.
    """
    if n_faces == 0:
        return _pow2(r), _pow2(r), 1
    best = None
    width = _pow2(r)
    while True:
        cols = width // r
        height = _pow2(-(-n_faces // cols) * r)
        key = (width * height, abs(np.log2(width / height)), width)
        if best is None or key < best[0]:
            best = (key, width, height, cols)
        if cols >= n_faces:
            break
        width *= 2
    return best[1], best[2], best[3]


@dataclass
class PackedAtlas:
    image: np.ndarray     # (H, W) gray in [0, 1]
    uv: np.ndarray        # (faces, 3, 2) corner UVs, OBJ convention (v up)
    origins: np.ndarray   # (faces, 2) chart top-left (column, row)
    flagged: np.ndarray   # (faces, r, r) texels never observed
    r: int

    @property
    def flagged_fraction(self) -> float:
        return float(self.flagged.mean()) if self.flagged.size else 0.0


def finalize_atlas(atlas: TextureAtlas) -> PackedAtlas:
    """Pack the per-face charts into a single power-of-two image.

    Unobserved texels become neutral gray and are flagged.  Texel ``(i, j)``
    of a chart maps to image column ``x0 + i`` and row ``y0 + j``; face
    corners sit on the centres of texels (0, 0), (r-1, 0) and (0, r-1).
    """
    r, F = atlas.r, atlas.n_faces
    W, H, cols = atlas_layout(F, r)
    f = np.arange(F)
    origins = np.stack([(f % cols) * r, (f // cols) * r], axis=1)
    flagged = ~atlas.filled
    colors = np.where(flagged, NEUTRAL, np.clip(atlas.state.C, 0.0, 1.0))
    image = np.full((H, W), NEUTRAL)
    if F:
        rows = origins[:, 1, None, None] + np.arange(r)[None, None, :]
        cols_ = origins[:, 0, None, None] + np.arange(r)[None, :, None]
        image[rows, cols_] = colors
    corners = np.array([[0.0, 0.0], [r - 1.0, 0.0], [0.0, r - 1.0]])
    px = origins[:, None, :] + corners[None] + 0.5
    uv = np.stack([px[..., 0] / W, 1.0 - px[..., 1] / H], axis=-1)
    return PackedAtlas(image, uv, origins, flagged, r)


def vertex_colors(atlas: TextureAtlas, mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex gray levels: mean of the observed corner texels of incident faces."""
    if mesh.n_faces != atlas.n_faces:
        raise ValueError("atlas was built for a different mesh")
    r = atlas.r
    corners = [(0, 0), (r - 1, 0), (0, r - 1)]
    total = np.zeros(mesh.n_vertices)
    count = np.zeros(mesh.n_vertices)
    for k, (i, j) in enumerate(corners):
        seen = atlas.filled[:, i, j]
        np.add.at(total, mesh.faces[seen, k], atlas.state.C[seen, i, j])
        np.add.at(count, mesh.faces[seen, k], 1)
    out = np.full(mesh.n_vertices, NEUTRAL)
    has = count > 0
    out[has] = total[has] / count[has]
    return np.clip(out, 0.0, 1.0)


def write_textured_obj(path, mesh: TriangleMesh, packed: PackedAtlas) -> tuple[Path, Path, Path]:
    """Write ``<stem>.obj``, ``<stem>.mtl`` and ``<stem>.png``; returns the three paths."""
    obj = Path(path).with_suffix(".obj")
    mtl, png = obj.with_suffix(".mtl"), obj.with_suffix(".png")
    Image.fromarray(np.clip(np.rint(packed.image * 255), 0, 255).astype(np.uint8)).save(png)
    with open(mtl, "w") as fh:
        fh.write("newmtl atlas\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\n")
        fh.write(f"map_Kd {png.name}\n")
    with open(obj, "w") as fh:
        fh.write(f"mtllib {mtl.name}\nusemtl atlas\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in packed.uv.reshape(-1, 2):
            fh.write(f"vt {t[0]:.17g} {t[1]:.17g}\n")
        for k, f in enumerate(mesh.faces + 1):
            t = 3 * k + 1
            fh.write(f"f {f[0]}/{t} {f[1]}/{t + 1} {f[2]}/{t + 2}\n")
    return obj, mtl, png
