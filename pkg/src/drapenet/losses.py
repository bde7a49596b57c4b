"""Training objective: data, interpenetration, normal and bending terms."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .mesh import DEGENERATE_AREA, SpatialIndex, TriMesh, avg_edge_length, face_normals_and_flags, vertex_normals
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    pen: float = 1.0
    norm: float = 0.3
    bend: float = 0.5
    d_tol: float = 0.05
    normal_extension_frac: float = 0.2

    def __post_init__(self):
        if min(self.pen, self.norm, self.bend, self.d_tol, self.normal_extension_frac) < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self):
        return asdict(self)


# incremented on every correspondence search, so tests can assert the search runs once per step
CORRESPONDENCE_CALLS = 0


@dataclass
class BodyContext:
    """Body quantities the penetration term needs, computed once per body."""

    vertices: np.ndarray
    normals: np.ndarray
    extended: np.ndarray  # vertices pushed out along their normals
    index: SpatialIndex

    @classmethod
    def from_mesh(cls, body: TriMesh, extension_frac: float = 0.2) -> "BodyContext":
        n = vertex_normals(body)
        ext = body.vertices + extension_frac * avg_edge_length(body) * n
        return cls(body.vertices, n, ext, SpatialIndex(body.vertices))


def _positions(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_positions(x))


def vertex_loss(pred, gt) -> Tensor:
    """Mean squared vertex distance."""
    p, g = _as_tensor(pred), _positions(gt)
    if p.shape != g.shape:
        raise ShapeError(f"vertex_loss: pred {p.shape} vs gt {g.shape}")
    return T.reduce_mean(T.reduce_sum(T.square(p - g), axis=1))


def correspondences(body, pred) -> np.ndarray:
    """Index of the nearest body vertex for every predicted garment vertex (ties to the lower index)."""
    global CORRESPONDENCE_CALLS
    CORRESPONDENCE_CALLS += 1
    index = body.index if isinstance(body, BodyContext) else SpatialIndex(_positions(body))
    return index.query_batch(_positions(pred), 1)[:, 0]


def penetration_loss(body: BodyContext, pred, gt, weights: LossWeights | None = None,
                     pairs: np.ndarray | None = None) -> Tensor:
    """Gated one-sided penalty on garment vertices behind the extended body tangent plane.

    The pairing and the d_tol gate are evaluated on current values and are
    not differentiated.
    """
    weights = weights or LossWeights()
    p, g = _as_tensor(pred), _positions(gt)
    if p.shape != g.shape:
        raise ShapeError(f"penetration_loss: pred {p.shape} vs gt {g.shape}")
    if pairs is None:
        pairs = correspondences(body, p)
    gate = (np.linalg.norm(p.data - g, axis=1) < weights.d_tol).astype(np.float64)
    normals = body.normals[pairs]
    signed = T.reduce_sum((p - body.extended[pairs]) * normals, axis=1)
    return T.reduce_sum(T.relu(-signed) * gate) * (1.0 / len(g))


def differentiable_face_normals(pred: Tensor, faces: np.ndarray, eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Unit normals of the predicted faces and the mask of degenerate ones."""
    v0 = T.gather_rows(pred, faces[:, 0])
    cross = T.cross_rows(T.gather_rows(pred, faces[:, 1]) - v0, T.gather_rows(pred, faces[:, 2]) - v0)
    norm = T.row_norm(cross, eps)
    degenerate = norm.data < DEGENERATE_AREA
    safe = T.add(norm, np.where(degenerate, 1.0, 0.0))
    return T.div(cross, T.reshape(safe, (-1, 1))), degenerate


def normal_loss(pred, gt: TriMesh) -> Tensor:
    """Mean of (1 - n_gt . n_pred)^2 over faces that are non-degenerate in both meshes."""
    p = _as_tensor(pred)
    if p.shape != gt.vertices.shape:
        raise ShapeError(f"normal_loss: pred {p.shape} vs gt {gt.vertices.shape}")
    n_gt, deg_gt = face_normals_and_flags(gt)
    n_pred, deg_pred = differentiable_face_normals(p, gt.faces)
    keep = ~(deg_gt | deg_pred)
    if not keep.any():
        return Tensor(0.0)
    dots = T.reduce_sum(n_pred * n_gt, axis=1)
    return T.reduce_sum(T.square(1.0 - dots) * keep.astype(np.float64)) * (1.0 / keep.sum())


def bending_loss(pred, gt, pairs: np.ndarray) -> Tensor:
    """Mean absolute change of two-ring pair distances."""
    p, g = _as_tensor(pred), _positions(gt)
    if len(pairs) == 0:
        log.warning("bending_loss: empty two-ring pair set, term is 0")
        return Tensor(0.0)
    d_gt = np.linalg.norm(g[pairs[:, 0]] - g[pairs[:, 1]], axis=1)
    diff = T.gather_rows(p, pairs[:, 0]) - T.gather_rows(p, pairs[:, 1])
    d_pred = T.row_norm(diff, 1e-12)
    return T.reduce_mean(T.absolute(d_pred - d_gt))


@dataclass
class LossBreakdown:
    total: Tensor
    vertex: float
    pen: float
    norm: float
    bend: float

    def as_dict(self) -> dict:
        return {"total": float(self.total.data), "vertex": self.vertex, "pen": self.pen,
                "norm": self.norm, "bend": self.bend}


def total_loss(pred, gt: TriMesh, body: BodyContext, pairs: np.ndarray, weights: LossWeights | None = None,
               correspondence: np.ndarray | None = None) -> LossBreakdown:
    weights = weights or LossWeights()
    p = _as_tensor(pred)
    lv = vertex_loss(p, gt)
    lp = penetration_loss(body, p, gt, weights, correspondence)
    ln = normal_loss(p, gt)
    lb = bending_loss(p, gt, pairs)
    total = lv + lp * weights.pen + ln * weights.norm + lb * weights.bend
    return LossBreakdown(total, float(lv.data), float(lp.data), float(ln.data), float(lb.data))
