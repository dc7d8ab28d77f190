"""Moving-point detection from cross-scan occupancy conflicts (Dempster-Shafer).

Masses are triples ``(empty, occupied, unknown)``.  Every point of scan k
is occupied by construction in its own scan; the beams of each other scan
in the window vote on its location, and a strong ``empty`` belief there is
a conflict that marks the point as moving.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .registration import AlignedScan

log = logging.getLogger(__name__)

VACUOUS = (0.0, 0.0, 1.0)
MIN_COS = np.cos(np.deg2rad(89.0))


class TotalConflict(ValueError):
    pass


@dataclass(frozen=True)
class MotionLabel:
    moving: bool
    conflict: float


def surface_range(point, origin, target, normal, min_cos: float = MIN_COS) -> float:
    """Range along ``origin -> point`` at which the tangent plane at ``target`` is crossed.

    Falls back to the beam length when no normal is known or the plane is
    seen too obliquely for a stable extrapolation.
    """
    r_b = float(np.linalg.norm(np.asarray(target) - origin))
    if normal is None or not np.all(np.isfinite(normal)):
        return r_b
    d = np.asarray(point, dtype=np.float64) - origin
    d = d / np.linalg.norm(d)
    den = float(np.dot(normal, d))
    if abs(den) < min_cos:
        return r_b
    return float(np.dot(normal, np.asarray(target) - origin)) / den


def beam_evidence(point, origin, target, theta_b: float, eps: float = 0.1, lam: float = 0.9,
                  normal=None):
    """Mass that one beam ``origin -> target`` assigns to the location ``point``.

    With a surface ``normal`` at the beam end, the point's range is compared
    with the local tangent plane along the point's own direction instead of
    with the beam length (identical for points on the beam line).
    """
    point, origin, target = (np.asarray(x, dtype=np.float64) for x in (point, origin, target))
    beam = target - origin
    r_b = float(np.linalg.norm(beam))
    if r_b <= 0:
        raise ValueError("beam must have positive length")
    v = point - origin
    r_p = float(np.linalg.norm(v))
    if r_p == 0:
        return VACUOUS
    cosang = np.clip(v @ beam / (r_p * r_b), -1.0, 1.0)
    if np.arccos(cosang) > theta_b:
        return VACUOUS
    if normal is not None:
        if not np.all(np.isfinite(normal)):
            # no local surface model: the beam can confirm but not clear the location
            return (0.0, lam, 1.0 - lam) if abs(r_p - r_b) <= eps else VACUOUS
        r_b = surface_range(point, origin, target, normal)
    if r_p < r_b - eps:
        return (lam, 0.0, 1.0 - lam)
    if r_p <= r_b + eps:
        return (0.0, lam, 1.0 - lam)
    return VACUOUS


def combine(a, b):
    """Dempster's rule on {empty, occupied}; returns ``(mass, conflict)``."""
    ae, ao, au = a
    be, bo, bu = b
    k = ae * bo + ao * be
    if k >= 1.0:
        raise TotalConflict("total conflict between certain, contradictory masses")
    n = 1.0 - k
    e = (ae * be + ae * bu + au * be) / n
    o = (ao * bo + ao * bu + au * bo) / n
    return (e, o, au * bu / n), k


def _combine_arrays(e, o, u, be, bo, bu):
    k = e * bo + o * be
    n = 1.0 - k
    return (e * be + e * bu + u * be) / n, (o * bo + o * bu + u * bo) / n, u * bu / n


def scan_mass(point, scan: AlignedScan, theta_b: float, eps: float = 0.1, lam: float = 0.9,
              saturation: float = 0.01, normals=None):
    """Aggregate the evidence of every beam of ``scan`` (nearest in angle first)."""
    v = scan.points - scan.sensor_center
    d = np.asarray(point, dtype=np.float64) - scan.sensor_center
    r = np.linalg.norm(v, axis=1)
    cosang = (v @ d) / np.maximum(r * np.linalg.norm(d), 1e-300)
    ang = np.arccos(np.clip(cosang, -1, 1))
    m = VACUOUS
    for j in np.argsort(ang, kind="stable"):
        if ang[j] > theta_b or m[2] < saturation:
            break
        nj = None if normals is None else normals[j]
        m, _ = combine(m, beam_evidence(point, scan.sensor_center, scan.points[j], theta_b, eps, lam, nj))
    return m


def classify_point(point, k: int, scans: list[AlignedScan], theta_b: float, eps: float = 0.1,
                   lam: float = 0.9, threshold: float = 0.5, window: int = 5,
                   surface_aware: bool = False, normals=None) -> MotionLabel:
    """Reference (per point) classifier; ``k`` is the index of the point's own scan.

    ``surface_aware`` enables tangent-plane ranges as in :func:`label_cloud`;
    ``normals`` may carry the per-scan :func:`beam_normals` to avoid
    recomputing them.
    """
    K = 0.0
    for i, s in enumerate(scans):
        if i == k or abs(i - k) > window:
            continue
        n_i = None
        if surface_aware:
            n_i = beam_normals(s) if normals is None else normals[i]
        e, o, u = scan_mass(point, s, theta_b, eps, lam, normals=n_i)
        K = max(K, e)  # conflict with the certain own-scan state (0, 1, 0)
    return MotionLabel(K > threshold, K)


def conflict_scores(points: np.ndarray, scan: AlignedScan, theta_b: float, eps: float = 0.1,
                    lam: float = 0.9, saturation: float = 0.01, max_beams: int = 16,
                    tree: cKDTree | None = None, normals=None) -> np.ndarray:
    """Vectorised ``scan_mass`` empty belief for many points against one scan."""
    n = len(points)
    if n == 0 or len(scan) == 0:
        return np.zeros(n)
    c = scan.sensor_center
    beam = scan.points - c
    r_b = np.linalg.norm(beam, axis=1)
    if tree is None:
        tree = cKDTree(beam / r_b[:, None])
    v = points - c
    r_p = np.linalg.norm(v, axis=1)
    u_p = v / np.maximum(r_p, 1e-300)[:, None]
    chord = 2 * np.sin(theta_b / 2)
    dist, idx = tree.query(u_p, k=max_beams, distance_upper_bound=chord * (1 + 1e-12))
    dist, idx = dist.reshape(n, -1), idx.reshape(n, -1)
    e = np.zeros(n)
    o = np.zeros(n)
    u = np.ones(n)
    for j in range(idx.shape[1]):
        valid = np.isfinite(dist[:, j]) & (u >= saturation) & (r_p > 0)
        if not valid.any():
            break
        b = idx[valid, j]
        # exact angular gate (the chord bound is only a prefilter)
        cosang = np.einsum("ij,ij->i", u_p[valid], beam[b]) / r_b[b]
        inside = np.arccos(np.clip(cosang, -1, 1)) <= theta_b
        rp, rb = r_p[valid], r_b[b]
        if normals is not None:
            nb = normals[b]
            den = np.einsum("ij,ij->i", nb, u_p[valid])
            stable = np.isfinite(den) & (np.abs(den) >= MIN_COS)
            with np.errstate(invalid="ignore", divide="ignore"):
                rs = np.einsum("ij,ij->i", nb, beam[b]) / den
            rb = np.where(stable, rs, rb)
            inside_e = inside & np.isfinite(den)
        else:
            inside_e = inside
        be = np.where(inside_e & (rp < rb - eps), lam, 0.0)
        bo = np.where(inside & (np.abs(rp - rb) <= eps), lam, 0.0)
        bu = 1.0 - be - bo
        ne, no, nu = _combine_arrays(e[valid], o[valid], u[valid], be, bo, bu)
        e[valid], o[valid], u[valid] = ne, no, nu
    return e


def beam_normals(scan: AlignedScan, tree: cKDTree | None = None, k: int = 9,
                 planarity: float = 0.05) -> np.ndarray:
    """Unit normals at beam ends from each beam's angular neighbours (NaN if not planar).

    Neighbours are taken in direction space so that adjacent scan lines
    contribute even where the rings are far apart.  Neighbourhoods whose
    smallest covariance eigenvalue exceeds ``planarity`` times the middle
    one (depth edges, clutter) get no normal.
    """
    n = len(scan)
    out = np.full((n, 3), np.nan)
    if n < 3:
        return out
    beam = scan.points - scan.sensor_center
    u = beam / np.maximum(np.linalg.norm(beam, axis=1), 1e-300)[:, None]
    tree = tree or cKDTree(u)
    _, nn = tree.query(u, k=min(k, n))
    nb = scan.points[nn] - scan.points[nn].mean(axis=1, keepdims=True)
    w, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    ok = w[:, 0] <= planarity * w[:, 1]
    nrm = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", nrm, beam) > 0
    nrm[flip] *= -1
    out[ok] = nrm[ok]
    return out


def label_cloud(scans: list[AlignedScan], theta_b: float, query=None, eps: float = 0.1, lam: float = 0.9,
                threshold: float = 0.5, window: int = 5, saturation: float = 0.01,
                surface_aware: bool = True) -> list[np.ndarray]:
    """Conflict score K for every point of every scan.

    ``query`` optionally gives, per scan, a boolean mask of the points to
    classify (e.g. non-ground points); others get K = 0.  A point is moving
    iff its K exceeds ``threshold``.  ``surface_aware`` compares ranges
    against the tangent plane at each beam end (see :func:`beam_evidence`).
    """
    trees, normals = [], []
    for s in scans:
        beam = s.points - s.sensor_center
        r = np.linalg.norm(beam, axis=1)
        tree = cKDTree(beam / np.maximum(r, 1e-300)[:, None]) if len(s) else None
        trees.append(tree)
        normals.append(beam_normals(s, tree) if surface_aware and tree is not None else None)
    out = []
    for k, s in enumerate(scans):
        K = np.zeros(len(s))
        mask = np.ones(len(s), dtype=bool) if query is None else np.asarray(query[k], dtype=bool)
        pts = s.points[mask]
        Kq = np.zeros(len(pts))
        for i, other in enumerate(scans):
            if i == k or abs(i - k) > window or trees[i] is None:
                continue
            Kq = np.maximum(Kq, conflict_scores(pts, other, theta_b, eps, lam, saturation, tree=trees[i],
                                                   normals=normals[i]))
        K[mask] = Kq
        out.append(K)
        log.debug("scan %d: %d/%d points moving", k, int((K > threshold).sum()), len(s))
    return out


def estimate_angular_resolution(scan_points: np.ndarray, center=None) -> float:
    """Beam spacing of a raw scan from the 4th-nearest beam direction (radians).

    On a regular azimuth x elevation fan this is the coarser of the two
    steps when they differ by less than a factor of two.
    """
    p = np.asarray(scan_points, dtype=np.float64)
    if center is not None:
        p = p - center
    u = p / np.linalg.norm(p, axis=1, keepdims=True)
    d, _ = cKDTree(u).query(u, k=5)
    return float(2 * np.arcsin(np.median(d[:, 4]) / 2))


def write_debug_csv(path, points: np.ndarray, K: np.ndarray, threshold: float = 0.5) -> None:
    data = np.column_stack([points, K, (K > threshold).astype(int)])
    np.savetxt(path, data, delimiter=",", header="x,y,z,K,label", comments="", fmt=["%.6f"] * 4 + ["%d"])
