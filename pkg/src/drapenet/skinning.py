"""Dual-quaternion skinning and distance-based skinning weights.

Quaternions are stored as (w, x, y, z). A rigid transform maps p to R(q) p + t.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from .mesh import TriMesh


class SkinningError(ValueError):
    pass


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.asarray(q) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_from_rotvec(rv) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    return quat_from_axis_angle(rv, float(np.linalg.norm(rv)))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    return quat_rotate(np.asarray(q, dtype=np.float64)[None, :], np.eye(3)).T


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            if n == 0.0:
                raise SkinningError("rotation quaternion has zero norm")
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, np.asarray(points, dtype=np.float64)) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(quat_mul(self.rotation, other.rotation),
                              quat_rotate(self.rotation, other.translation) + self.translation)

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.rotation)
        return RigidTransform(qi, -quat_rotate(qi, self.translation))


@dataclass(frozen=True)
class PoseSkeleton:
    """Joint tree rooted at joint 0.

    ``rest`` holds each joint's rest-pose frame in world space; ``pose`` holds
    the per-joint skinning transform taking rest-space points to posed space.
    """

    parents: tuple[int, ...]
    rest: tuple[RigidTransform, ...]
    pose: tuple[RigidTransform, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        if not parents or parents[0] != -1:
            raise SkinningError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(parents[1:], start=1):
            if not 0 <= p < j:
                raise SkinningError(f"joint {j} has parent {p}; parents must precede children")
        if len(self.rest) != len(parents) or len(self.pose) != len(parents):
            raise SkinningError("rest and pose must have one transform per joint")
        object.__setattr__(self, "parents", parents)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"joint{j}" for j in range(len(parents))))

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == j]

    def rest_positions(self) -> np.ndarray:
        return np.array([r.translation for r in self.rest])

    def posed_positions(self) -> np.ndarray:
        return np.array([self.pose[j].apply(r.translation) for j, r in enumerate(self.rest)])

    def bones(self) -> list[tuple[int, int]]:
        return [(p, c) for c, p in enumerate(self.parents) if p >= 0]

    def with_pose(self, pose) -> "PoseSkeleton":
        return PoseSkeleton(self.parents, self.rest, tuple(pose), self.names)

    def identity_pose(self) -> "PoseSkeleton":
        return self.with_pose([RigidTransform() for _ in self.parents])

    def posed_from_local(self, local_rotations: np.ndarray, root_translation=(0.0, 0.0, 0.0)) -> "PoseSkeleton":
        """Forward kinematics from per-joint local rotation vectors (J, 3).

        Rest frames are taken as axis-aligned, so joint j's posed frame is its
        parent's posed frame followed by its rest offset and local rotation.
        """
        local_rotations = np.asarray(local_rotations, dtype=np.float64).reshape(self.n_joints, 3)
        rest_pos = self.rest_positions()
        glob: list[RigidTransform] = []
        for j, p in enumerate(self.parents):
            q = quat_from_rotvec(local_rotations[j])
            if p < 0:
                g = RigidTransform(q, rest_pos[j] + np.asarray(root_translation, dtype=np.float64))
            else:
                g = glob[p].compose(RigidTransform(q, rest_pos[j] - rest_pos[p]))
            glob.append(g)
        pose = [g.compose(RigidTransform(translation=-rest_pos[j])) for j, g in enumerate(glob)]
        return self.with_pose(pose)


@dataclass(frozen=True)
class SkinWeights:
    """Sparse N x J weights stored as padded (N, K) joint indices and values."""

    indices: np.ndarray
    values: np.ndarray
    n_joints: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 2:
            raise SkinningError("indices and values must both be (N, K)")
        if np.any(val < 0):
            raise SkinningError("skinning weights must be nonnegative")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_joints):
            raise SkinningError("joint index out of range")
        sums = val.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if len(bad):
            raise SkinningError(f"weight row {bad[0]} sums to {sums[bad[0]]}, expected 1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def n_rows(self) -> int:
        return len(self.indices)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_joints))
        np.add.at(out, (np.arange(self.n_rows)[:, None], self.indices), self.values)
        return out

    @classmethod
    def from_dense(cls, w: np.ndarray, max_influences: int | None = None) -> "SkinWeights":
        w = np.asarray(w, dtype=np.float64)
        k = max_influences or w.shape[1]
        order = np.argsort(-w, axis=1, kind="stable")[:, :k]
        vals = np.take_along_axis(w, order, axis=1)
        vals = vals / vals.sum(axis=1, keepdims=True)
        return cls(order, vals, w.shape[1])


def dual_quaternions(transforms) -> tuple[np.ndarray, np.ndarray]:
    qr = np.array([t.rotation for t in transforms])
    tq = np.concatenate([np.zeros((len(qr), 1)), np.array([t.translation for t in transforms])], axis=1)
    qd = 0.5 * quat_mul(tq, qr)
    return qr, qd


def dqs(template: TriMesh, pose: PoseSkeleton, weights: SkinWeights) -> TriMesh:
    """Dual-quaternion skinning of ``template`` by the skeleton's pose transforms."""
    if weights.n_rows != template.n_vertices:
        raise SkinningError(f"weights have {weights.n_rows} rows, template has {template.n_vertices} vertices")
    if weights.n_joints != pose.n_joints:
        raise SkinningError(f"weights have {weights.n_joints} columns, skeleton has {pose.n_joints} joints")
    qr, qd = dual_quaternions(pose.pose)
    idx, w = weights.indices, weights.values
    pivot = idx[np.arange(len(idx)), np.argmax(w, axis=1)]
    r = qr[idx]  # (N, K, 4)
    d = qd[idx]
    sign = np.where(np.einsum("nkc,nc->nk", r, qr[pivot]) < 0, -1.0, 1.0)
    ws = (w * sign)[..., None]
    br = (ws * r).sum(axis=1)
    bd = (ws * d).sum(axis=1)
    norm = np.linalg.norm(br, axis=1)
    bad = np.flatnonzero(norm < 1e-12)
    if len(bad):
        raise SkinningError(f"blended rotation vanishes at vertex {bad[0]} (antipodal cancellation)")
    br = br / norm[:, None]
    bd = bd / norm[:, None]
    v = template.vertices
    rw, rv = br[:, :1], br[:, 1:]
    dw, dv = bd[:, :1], bd[:, 1:]
    rotated = v + 2.0 * np.cross(rv, np.cross(rv, v) + rw * v)
    trans = 2.0 * (rw * dv - dw * rv + np.cross(rv, dv))
    return template.with_vertices(rotated + trans)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points (N, 3) to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=1)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def distance_weights(mesh: TriMesh, skeleton: PoseSkeleton, max_influences: int = 4,
                     falloff: float = 0.1) -> SkinWeights:
    """Weights proportional to exp(-d^2/falloff^2), d = distance to a joint's bones.

    Bones are rest-pose (parent, child) segments; each is driven by its parent
    joint, so joints without children receive no weight.
    """
    pos = skeleton.rest_positions()
    v = mesh.vertices
    big = np.inf
    d = np.full((len(v), skeleton.n_joints), big)
    for p, c in skeleton.bones():
        d[:, p] = np.minimum(d[:, p], point_segment_distance(v, pos[p], pos[c]))
    if not np.isfinite(d).any():
        raise SkinningError("skeleton has no bones")
    logw = -(d / falloff) ** 2
    k = min(max_influences, int(np.isfinite(d[0]).sum()))
    order = np.argsort(-logw, axis=1, kind="stable")[:, :k]
    lw = np.take_along_axis(logw, order, axis=1)
    w = np.exp(lw - lw[:, :1])
    w /= w.sum(axis=1, keepdims=True)
    return SkinWeights(order, w, skeleton.n_joints)


def _transform_to_json(t: RigidTransform) -> dict:
    return {"rotation": t.rotation.tolist(), "translation": t.translation.tolist()}


def _transform_from_json(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))


def save_rig(path: str | PathLike, skeleton: PoseSkeleton, weights: SkinWeights | None = None) -> None:
    """Write skeleton (and optional weights) as JSON; see docs/formats.md."""
    doc = {
        "format": "drapenet-rig",
        "version": 1,
        "joints": [
            {"name": n, "parent": p, "rest": _transform_to_json(r), "pose": _transform_to_json(q)}
            for n, p, r, q in zip(skeleton.names, skeleton.parents, skeleton.rest, skeleton.pose)
        ],
    }
    if weights is not None:
        doc["weights"] = {
            "n_joints": weights.n_joints,
            "rows": [[[int(j), float(w)] for j, w in zip(ji, wi) if w > 0]
                     for ji, wi in zip(weights.indices, weights.values)],
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_rig(path: str | PathLike) -> tuple[PoseSkeleton, SkinWeights | None]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "drapenet-rig" or doc.get("version") != 1:
        raise SkinningError(f"{path}: not a version-1 drapenet-rig file")
    joints = doc["joints"]
    skel = PoseSkeleton(
        tuple(j["parent"] for j in joints),
        tuple(_transform_from_json(j["rest"]) for j in joints),
        tuple(_transform_from_json(j["pose"]) for j in joints),
        tuple(j["name"] for j in joints),
    )
    weights = None
    if "weights" in doc:
        rows = doc["weights"]["rows"]
        k = max((len(r) for r in rows), default=1)
        idx = np.zeros((len(rows), k), dtype=np.int64)
        val = np.zeros((len(rows), k))
        for i, r in enumerate(rows):
            for slot, (j, w) in enumerate(r):
                idx[i, slot] = j
                val[i, slot] = w
        weights = SkinWeights(idx, val, doc["weights"]["n_joints"])
    return skel, weights
