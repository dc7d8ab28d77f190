"""Mesh accuracy against a reference cloud, and label precision/recall."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvh import BVH
from .geometry import TriangleMesh, as_points


@dataclass
class ErrorReport:
    avg: float
    std: float
    distances: np.ndarray
    n_points: int

    def to_dict(self) -> dict:
        return {"avg_m": self.avg, "std_m": self.std, "n_points": self.n_points}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def __str__(self) -> str:
        return f"avg {self.avg:.4f} m  std {self.std:.4f} m  over {self.n_points} points"


def mesh_to_cloud_error(mesh: TriangleMesh, reference) -> ErrorReport:
    """Distance from every reference point to the nearest mesh triangle.

    The standard deviation is over the per-point distances (population
    convention).
    """
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    pts = as_points(reference)
    if len(pts) == 0:
        raise ValueError("reference cloud is empty")
    d = BVH.build(mesh.triangles()).nearest(pts)[0]
    return ErrorReport(float(d.mean()), float(d.std()), d, len(d))


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform random samples on the mesh surface."""
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    face = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    r = rng.random((n, 2))
    fold = r.sum(axis=1) > 1
    r[fold] = 1 - r[fold]
    tri = mesh.triangles()[face]
    return tri[:, 0] + r[:, :1] * (tri[:, 1] - tri[:, 0]) + r[:, 1:] * (tri[:, 2] - tri[:, 0])


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @property
    def false_positive_rate(self) -> float:
        neg = self.false_positive + self.true_negative
        return self.false_positive / neg if neg else 0.0


def detection_metrics(predicted, truth) -> DetectionMetrics:
    """Precision and recall of the positive class.

    Empty denominators give 1.0: no predicted positives means no false
    alarms, no true positives means nothing was missed.
    """
    p = np.asarray(predicted, dtype=bool).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if p.shape != t.shape:
        raise ValueError("label vectors differ in length")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return DetectionMetrics(precision, recall, tp, fp, fn, tn)
