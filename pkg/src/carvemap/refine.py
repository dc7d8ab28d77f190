"""Photometric mesh refinement.

For every ordered camera pair (i, j) the image of camera j is reprojected
into camera i through the current mesh and compared with image i by
1 - ZNCC over square patches.  Vertices follow the analytic gradient of the
summed error, with umbrella smoothing added to every step.  Pixels under the
moving-object mask of either camera take no part in the error.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraView, GeometryError, TriangleMesh, edge_face_counts, projection_jacobians
from .raster import RenderBuffers, adjacent_seen, bilinear, hit_points, in_frame, rasterize, visible_from

log = logging.getLogger(__name__)

MIN_VARIANCE = 1e-12   # per-pixel patch variance below which a patch counts as flat
MIN_FILL = 0.5         # fraction of a patch that must lie in the domain
GRAZING = 0.05
MIN_STEP = 1e-5
SATURATION = 0.05      # per-pixel gradient (1/m) at which a vertex takes half a step


@dataclass
class RefineConfig:
    iterations: int = 30
    patch: int = 5          # half-width, so 11 x 11 patches
    step: float = 0.02      # largest vertex displacement of a photometric step, metres
    smooth: float = 0.3     # umbrella weight
    pairs: int = 2          # partners per view
    grazing: float = GRAZING
    min_step: float = MIN_STEP
    saturation: float = SATURATION

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("patch half-width must be at least 1")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.smooth < 0:
            raise ValueError("smoothing weight must be non-negative")
        if self.iterations < 0 or self.pairs < 1:
            raise ValueError("iterations must be >= 0 and pairs >= 1")


# --- moving masks -----------------------------------------------------------------

def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def build_moving_mask(view: CameraView, moving_points, box: int = 11, dilate: int = 10,
                      erode: int = 7) -> np.ndarray:
    """Pixels covered by projected moving points after box filter, disk dilation and disk erosion.

    The morphology runs on a padded canvas so points just outside the frame
    still reach into it and the frame border does not erode the mask.
    """
    pad = box // 2 + dilate + erode + 2
    H, W = view.height, view.width
    canvas = np.zeros((H + 2 * pad, W + 2 * pad), dtype=bool)
    pts = np.asarray(moving_points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        uv, z = view.project_points(pts)
        front = z > 0
        px = np.rint(uv[front]).astype(np.int64) + pad
        inside = (px[:, 0] >= 0) & (px[:, 0] < W + 2 * pad) & (px[:, 1] >= 0) & (px[:, 1] < H + 2 * pad)
        canvas[px[inside, 1], px[inside, 0]] = True
    if not canvas.any():
        return np.zeros((H, W), dtype=bool)
    m = ndimage.binary_dilation(canvas, np.ones((box, box), dtype=bool))
    m = ndimage.binary_dilation(m, disk(dilate))
    m = ndimage.binary_erosion(m, disk(erode))
    return m[pad:pad + H, pad:pad + W]


# --- view pairs -------------------------------------------------------------------

def pose_distance(a: CameraView, b: CameraView) -> float:
    """Centre distance in metres plus rotation angle in radians."""
    R = a.pose.rotation @ b.pose.rotation.T
    angle = np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0))
    return float(np.linalg.norm(a.center - b.center) + angle)


def select_pairs(views: list[CameraView], w: int = 2) -> list[tuple[int, int]]:
    """Ordered pairs (i, j): each view with its ``w`` nearest views (ties by index)."""
    out = []
    for i, vi in enumerate(views):
        others = [j for j in range(len(views)) if j != i]
        d = np.array([pose_distance(vi, views[j]) for j in others])
        order = np.argsort(d, kind="stable")[:w]
        out += [(i, others[k]) for k in order]
    return out


# --- reprojection -----------------------------------------------------------------

@dataclass
class Reprojection:
    image: np.ndarray      # I_ij, 0 outside the domain
    domain: np.ndarray     # Omega_ij
    grad: np.ndarray       # (H, W, 2) image gradient of I_j at the reprojected position
    uv: np.ndarray         # (H, W, 2) position in view j
    points: np.ndarray     # (H, W, 3) surface hit of each pixel of view i
    buffers: RenderBuffers


def reproject(view_i: CameraView, view_j: CameraView, mesh: TriangleMesh,
              buffers_i: RenderBuffers | None = None,
              buffers_j: RenderBuffers | None = None) -> Reprojection:
    """Warp image j into camera i through the mesh.

    The domain holds pixels of view i whose ray hits the mesh at a point
    seen unoccluded by view j and inside its frame, and whose bilinear
    footprint in view j is covered by the mesh.
    """
    if view_j.image is None:
        raise ValueError("view j has no image")
    H, W = view_i.height, view_i.width
    bi = buffers_i if buffers_i is not None else rasterize(mesh, view_i)
    X = hit_points(mesh, bi)
    covered = bi.covered
    image = np.zeros((H, W))
    grad = np.zeros((H, W, 2))
    uv = np.full((H, W, 2), np.nan)
    domain = np.zeros((H, W), dtype=bool)
    if covered.any():
        bj = buffers_j if buffers_j is not None else rasterize(mesh, view_j)
        pts = X[covered]
        own = bi.face[covered]
        vis, uvj = visible_from(view_j, mesh, bj, pts, own, tol=1e-3, rel_tol=1e-3)
        ok = np.isfinite(uvj).all(axis=1)
        vis |= ok & adjacent_seen(mesh, bj, own, uvj)
        ok &= vis
        ok[ok] = in_frame(view_j, uvj[ok])
        # the bilinear footprint must lie on the mesh, not straddle its silhouette
        ok[ok] = _taps_covered(bj.covered, uvj[ok])
        idx = np.flatnonzero(covered)[ok]
        val, g = bilinear(view_j.image, uvj[ok])
        image.flat[idx] = val
        grad.reshape(-1, 2)[idx] = g
        uv.reshape(-1, 2)[np.flatnonzero(covered)] = uvj
        domain.flat[idx] = True
    return Reprojection(image, domain, grad, uv, X, bi)


def _taps_covered(covered: np.ndarray, uv: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Are all pixels with non-zero bilinear weight covered?

    A coordinate within ``eps`` of an integer uses that single row/column, so
    round-off around exact pixel centres cannot flip the answer.
    """
    H, W = covered.shape
    lo_u = np.clip(np.floor(uv[:, 0] + eps).astype(np.int64), 0, W - 1)
    hi_u = np.clip(np.ceil(uv[:, 0] - eps).astype(np.int64), 0, W - 1)
    lo_v = np.clip(np.floor(uv[:, 1] + eps).astype(np.int64), 0, H - 1)
    hi_v = np.clip(np.ceil(uv[:, 1] - eps).astype(np.int64), 0, H - 1)
    return covered[lo_v, lo_u] & covered[lo_v, hi_u] & covered[hi_v, lo_u] & covered[hi_v, hi_u]


def reprojected_mask(mask_j: np.ndarray, uv: np.ndarray, domain: np.ndarray) -> np.ndarray:
    """m_ij: the moving mask of view j looked up at the nearest reprojected pixel."""
    out = np.zeros(domain.shape, dtype=bool)
    if mask_j is None or not domain.any():
        return out
    H, W = mask_j.shape
    p = np.rint(uv[domain]).astype(np.int64)
    out[domain] = mask_j[np.clip(p[:, 1], 0, H - 1), np.clip(p[:, 0], 0, W - 1)]
    return out


# --- ZNCC error -------------------------------------------------------------------

def _box(x: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window around every pixel, zero outside the image."""
    c = np.cumsum(np.cumsum(np.pad(x, ((r + 1, r), (r + 1, r))), axis=0), axis=1)
    k = 2 * r + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def photo_error(I, J, domain, patch: int = 5) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed 1 - ZNCC over the domain and its derivative with respect to ``J``.

    Patches only use pixels of the domain.  Pixels whose patch is flat in
    either image, or less than half inside the domain, contribute 0.  Returns ``(E, dE/dJ, per-pixel err)``.
    """
    I = np.asarray(I, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    if I.shape != J.shape:
        raise ValueError("images must have the same size")
    m = np.asarray(domain, dtype=bool)
    if not m.any():
        return 0.0, np.zeros_like(J), np.zeros_like(J)
    fm = m.astype(np.float64)
    a = np.where(m, I, 0.0)
    b = np.where(m, J, 0.0)
    n = _box(fm, patch)
    Sa, Sb = _box(a, patch), _box(b, patch)
    Saa, Sbb, Sab = _box(a * a, patch), _box(b * b, patch), _box(a * b, patch)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_a = np.where(n > 0, Sa / n, 0.0)
        mu_b = np.where(n > 0, Sb / n, 0.0)
        va = Saa - Sa * mu_a
        vb = Sbb - Sb * mu_b
        cov = Sab - Sa * mu_b
        valid = m & (n >= MIN_FILL * (2 * patch + 1) ** 2) & (va > MIN_VARIANCE * n) & (vb > MIN_VARIANCE * n)
        root = np.sqrt(np.where(valid, va * vb, 1.0))
        zeta = np.where(valid, cov / root, 0.0)
        # derivative of 1 - zeta_p with respect to b_q for every q in the patch of p:
        # -(a_q - mu_a_p) / root_p + zeta_p (b_q - mu_b_p) / vb_p
        alpha = np.where(valid, 1.0 / root, 0.0)
        beta = np.where(valid, zeta / np.where(valid, vb, 1.0), 0.0)
    err = np.where(valid, 1.0 - zeta, 0.0)
    dJ = -(a * _box(alpha, patch) - _box(alpha * mu_a, patch)) + (b * _box(beta, patch) - _box(beta * mu_b, patch))
    dJ = np.where(m, dJ, 0.0)
    return float(err.sum()), dJ, err


# --- energy and gradient ----------------------------------------------------------

@dataclass
class PairTerm:
    pair: tuple[int, int]
    energy: float
    pixels: int            # |Lambda|


@dataclass
class PhotoEvaluation:
    energy: float
    gradient: np.ndarray   # (V, 3)
    support: np.ndarray    # (V,) barycentric pixel weight over all Lambda domains
    terms: list[PairTerm] = field(default_factory=list)

    @property
    def observed(self) -> np.ndarray:
        return np.any(self.gradient != 0, axis=1)


def _pair_domain(view_i, view_j, rep: Reprojection, mesh: TriangleMesh, grazing: float):
    """Lambda and the per-pixel geometry needed by the gradient."""
    bi = rep.buffers
    lam = rep.domain.copy()
    if view_i.moving_mask is not None:
        lam &= ~view_i.moving_mask
    lam &= ~reprojected_mask(view_j.moving_mask, rep.uv, rep.domain)
    idx = np.flatnonzero(lam)
    face = bi.face.flat[idx]
    normals = mesh.face_normals()[face]
    X = rep.points.reshape(-1, 3)[idx]
    d = X - view_i.center
    nd = np.einsum("ij,ij->i", normals, d)
    steep = np.abs(nd) >= grazing * np.linalg.norm(d, axis=1)
    lam.flat[idx[~steep]] = False
    return lam, idx[steep], face[steep], normals[steep], X[steep], d[steep], nd[steep]


def evaluate(mesh: TriangleMesh, views: list[CameraView], pairs, patch: int = 5,
             grazing: float = GRAZING, with_gradient: bool = True) -> PhotoEvaluation:
    """E_photo over all pairs and its analytic vertex gradient.

    For each pixel x of Lambda with hit X = c_i + d on face n, the gradient of
    the error with respect to the reprojected intensity is carried to the
    surface as  dE/dJ * grad I_j * dPi_j(X) * d / (n . d)  along n, split on
    the face vertices by barycentric weights.
    """
    V = mesh.n_vertices
    G = np.zeros((V, 3))
    support = np.zeros(V)
    total = 0.0
    terms = []
    buffers = {}

    def buf(k):
        if k not in buffers:
            buffers[k] = rasterize(mesh, views[k])
        return buffers[k]

    # pairs are processed in their fixed order so the reduction is reproducible
    for i, j in pairs:
        vi, vj = views[i], views[j]
        if vi.image is None:
            raise ValueError(f"view {i} has no image")
        rep = reproject(vi, vj, mesh, buf(i), buf(j))
        lam, idx, face, normals, X, d, nd = _pair_domain(vi, vj, rep, mesh, grazing)
        E, dJ, _ = photo_error(vi.image, rep.image, lam, patch)
        total += E
        terms.append(PairTerm((i, j), E, int(lam.sum())))
        if not with_gradient or len(idx) == 0:
            continue
        Jac = projection_jacobians(vj, X)
        g = rep.grad.reshape(-1, 2)[idx]
        dx = np.einsum("ni,nij,nj->n", g, Jac, d)
        s = dJ.flat[idx] * dx / nd
        bary = rep.buffers.bary.reshape(-1, 3)[idx]
        corners = mesh.faces[face]
        for k in range(3):
            support += np.bincount(corners[:, k], weights=bary[:, k], minlength=V)
            w = s * bary[:, k]
            for c in range(3):
                G[:, c] += np.bincount(corners[:, k], weights=w * normals[:, c], minlength=V)
    return PhotoEvaluation(total, G, support, terms)


def photo_energy(mesh, views, pairs, patch: int = 5, grazing: float = GRAZING) -> float:
    return evaluate(mesh, views, pairs, patch, grazing, with_gradient=False).energy


def photo_gradient(mesh, views, pairs, patch: int = 5, grazing: float = GRAZING) -> np.ndarray:
    return evaluate(mesh, views, pairs, patch, grazing).gradient


# --- smoothing --------------------------------------------------------------------

def boundary_vertices(mesh: TriangleMesh) -> np.ndarray:
    edges, counts = edge_face_counts(mesh.faces)
    out = np.zeros(mesh.n_vertices, dtype=bool)
    out[edges[counts == 1].ravel()] = True
    return out


def umbrella(mesh: TriangleMesh) -> np.ndarray:
    """Mean of the one-ring minus the vertex (zero for isolated vertices)."""
    e = mesh.edges
    V = mesh.n_vertices
    deg = np.bincount(e.ravel(), minlength=V).astype(np.float64)
    acc = np.zeros((V, 3))
    for c in range(3):
        acc[:, c] = (np.bincount(e[:, 0], weights=mesh.vertices[e[:, 1], c], minlength=V)
                     + np.bincount(e[:, 1], weights=mesh.vertices[e[:, 0], c], minlength=V))
    out = np.zeros((V, 3))
    has = deg > 0
    out[has] = acc[has] / deg[has, None] - mesh.vertices[has]
    return out


def umbrella_step(mesh: TriangleMesh, lam: float, fixed=None) -> np.ndarray:
    """Displacements lam * (one-ring mean - X); ``fixed`` vertices do not move."""
    delta = lam * umbrella(mesh)
    if fixed is not None:
        delta[np.asarray(fixed, dtype=bool)] = 0.0
    return delta


def smoothness(mesh: TriangleMesh, fixed=None) -> float:
    """Sum of squared umbrella vectors, in units of the mean edge length."""
    if mesh.n_faces == 0:
        return 0.0
    L = umbrella(mesh)
    if fixed is not None:
        L[np.asarray(fixed, dtype=bool)] = 0.0
    e = mesh.edges
    h = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean()
    return float((L ** 2).sum() / h ** 2)


# --- descent ----------------------------------------------------------------------

@dataclass
class RefineResult:
    mesh: TriangleMesh
    energies: list[float]         # E_photo of the input and of every accepted iterate
    objective: list[float]        # E_photo + smooth * smoothness, same indexing
    iterations: int
    accepted: int
    final_scale: float
    aborted: bool = False
    reason: str = ""

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "e_photo", "objective"])
            for k, (e, o) in enumerate(zip(self.energies, self.objective)):
                w.writerow([k, repr(e), repr(o)])


def descent_direction(ev: PhotoEvaluation, saturation: float = SATURATION) -> np.ndarray:
    """Per-vertex direction G / (|G| + saturation * support), length below 1.

    Dividing by the pixel support makes the gradient a per-pixel rate, so
    strongly misplaced vertices take (nearly) a full step while vertices
    close to photo-consistency move in proportion to their gradient.
    """
    G = ev.gradient
    norm = np.linalg.norm(G, axis=1)
    den = norm + saturation * ev.support
    return np.where(den[:, None] > 0, G / np.where(den > 0, den, 1.0)[:, None], 0.0)


def _check_views(views):
    for k, v in enumerate(views):
        if v.image is None:
            raise ValueError(f"view {k} has no image")
        if v.moving_mask is None:
            raise ValueError(f"view {k} has no moving mask")


def refine(mesh: TriangleMesh, views: list[CameraView], config: RefineConfig | None = None,
           pairs=None) -> RefineResult:
    """Gradient descent on E_photo with umbrella smoothing and backtracking.

    A trial moves every vertex by ``-s * step * descent_direction`` plus
    ``s * umbrella_step``.  It is accepted only when neither E_photo nor
    E_photo + smooth * smoothness increases; otherwise ``s`` is halved.
    After an accepted trial ``s`` doubles again, up to 1.  Descent stops
    after ``config.iterations`` accepted steps or when ``s * step`` drops
    below ``config.min_step``.  Boundary vertices of open meshes are not
    smoothed.
    """
    cfg = config or RefineConfig()
    if not mesh.manifold:
        raise GeometryError("refinement needs a manifold-flagged mesh")
    _check_views(views)
    if pairs is None:
        pairs = select_pairs(views, cfg.pairs)
    if not pairs:
        raise ValueError("refinement needs at least one view pair")
    fixed = boundary_vertices(mesh)
    cur = mesh.copy()
    ev = evaluate(cur, views, pairs, cfg.patch, cfg.grazing)
    obj = ev.energy + cfg.smooth * smoothness(cur, fixed)
    energies, objective = [ev.energy], [obj]
    scale, accepted, it = 1.0, 0, 0
    aborted, reason = False, ""
    while accepted < cfg.iterations:
        if scale * cfg.step < cfg.min_step:
            reason = "step below minimum"
            break
        it += 1
        move = umbrella_step(cur, cfg.smooth, fixed) - cfg.step * descent_direction(ev, cfg.saturation)
        if not np.any(move):
            reason = "zero update"
            break
        trial = cur.copy()
        trial.vertices = cur.vertices + scale * move
        if trial.degenerate_faces().any() or not trial.check_manifold():
            aborted, reason = True, "mesh degenerated"
            log.warning("refinement aborted after %d steps: %s", accepted, reason)
            break
        tev = evaluate(trial, views, pairs, cfg.patch, cfg.grazing)
        tobj = tev.energy + cfg.smooth * smoothness(trial, fixed)
        if tev.energy <= ev.energy and tobj <= obj:
            cur, ev, obj = trial, tev, tobj
            energies.append(ev.energy)
            objective.append(obj)
            accepted += 1
            scale = min(1.0, 2 * scale)
            log.debug("refine step %d: E_photo %.6g", accepted, ev.energy)
        else:
            scale *= 0.5
    if not reason:
        reason = "iteration limit"
    log.info("refinement: %d accepted of %d trials, E_photo %.6g -> %.6g (%s)",
             accepted, it, energies[0], energies[-1], reason)
    return RefineResult(cur, energies, objective, it, accepted, scale, aborted, reason)


def write_trace_csv(path, result: RefineResult) -> Path:
    path = Path(path)
    result.write_trace(path)
    return path
