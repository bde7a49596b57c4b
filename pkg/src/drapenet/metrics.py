"""Evaluation measures for predicted drapes."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from os import PathLike

import numpy as np

from .mesh import TriMesh, face_normals_and_flags


class MetricError(ValueError):
    pass


def _pair(pred: TriMesh, gt: TriMesh):
    if pred.n_vertices != gt.n_vertices:
        raise MetricError(f"vertex count mismatch: pred {pred.n_vertices}, gt {gt.n_vertices}")
    return pred.vertices, gt.vertices


def vertex_errors(pred: TriMesh, gt: TriMesh) -> np.ndarray:
    p, g = _pair(pred, gt)
    return np.linalg.norm(g - p, axis=1)


def e_dist(pred: TriMesh, gt: TriMesh) -> float:
    """Mean vertex-to-vertex distance (meters)."""
    return float(vertex_errors(pred, gt).mean())


def normal_errors(pred: TriMesh, gt: TriMesh) -> np.ndarray:
    """Per-face angle (degrees) between normals, over faces non-degenerate in both meshes."""
    if not np.array_equal(pred.faces, gt.faces):
        raise MetricError("pred and gt face lists differ")
    n_p, deg_p = face_normals_and_flags(pred)
    n_g, deg_g = face_normals_and_flags(gt)
    keep = ~(deg_p | deg_g)
    cos = np.clip((n_p[keep] * n_g[keep]).sum(axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def e_norm(pred: TriMesh, gt: TriMesh) -> float:
    """Mean facet-normal angular deviation (degrees)."""
    errs = normal_errors(pred, gt)
    return float(errs.mean()) if len(errs) else 0.0


def normalized_l2_percent(pred: TriMesh, gt: TriMesh) -> float:
    """100 * |gt - pred| / |gt| after mapping both into [0, 1]^3 with the gt bounding box."""
    p, g = _pair(pred, gt)
    lo = g.min(axis=0)
    span = g.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    gn = (g - lo) / span
    pn = (p - lo) / span
    denom = np.linalg.norm(gn)
    if denom == 0:
        raise MetricError("ground truth has zero norm after normalization")
    return float(100.0 * np.linalg.norm(gn - pn) / denom)


def precision_curve(errors, thresholds) -> list[float]:
    """Fraction of errors strictly below each (ascending) threshold."""
    errors = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise MetricError("thresholds must be ascending")
    if len(errors) == 0:
        return [0.0] * len(thresholds)
    return (np.searchsorted(errors, thresholds, side="left") / len(errors)).tolist()


DIST_THRESHOLDS = tuple(np.round(np.linspace(0.0, 0.10, 21), 6))  # meters
ANGLE_THRESHOLDS = tuple(float(a) for a in range(0, 91, 5))  # degrees


@dataclass
class EvalReport:
    e_dist: float
    e_norm: float
    normalized_l2_percent: float
    precision_curve: list = field(default_factory=list)  # (threshold, fraction) for distances
    angle_curve: list = field(default_factory=list)

    def __post_init__(self):
        if self.e_dist < 0 or not 0 <= self.e_norm <= 180:
            raise MetricError("e_dist must be >= 0 and e_norm within [0, 180]")

    def to_dict(self):
        return asdict(self)


def evaluate_pair(pred: TriMesh, gt: TriMesh) -> EvalReport:
    d = vertex_errors(pred, gt)
    a = normal_errors(pred, gt)
    return EvalReport(
        float(d.mean()), float(a.mean()) if len(a) else 0.0, normalized_l2_percent(pred, gt),
        list(zip(DIST_THRESHOLDS, precision_curve(d, DIST_THRESHOLDS))),
        list(zip(ANGLE_THRESHOLDS, precision_curve(a, ANGLE_THRESHOLDS))),
    )


def write_curve_csv(path: str | PathLike, curve, header=("threshold", "fraction")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, f in curve:
            w.writerow([f"{t:.6g}", f"{f:.6f}"])
