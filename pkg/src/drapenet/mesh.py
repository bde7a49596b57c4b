"""Triangle meshes, derived geometry, neighborhood queries and OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertices (N, 3) in meters and CCW-wound faces (F, 3)."""

    vertices: np.ndarray
    faces: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex positions must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range for {len(v)} vertices")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("a face repeats a vertex")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology, new positions; topology-derived caches are shared."""
        out = TriMesh(vertices, self.faces)
        for key in ("edges", "one_ring", "two_ring"):
            if key in self._cache:
                out._cache[key] = self._cache[key]
        return out

    @property
    def edges(self) -> np.ndarray:
        if "edges" not in self._cache:
            self._cache["edges"] = unique_edges(self.faces)
        return self._cache["edges"]

    @property
    def one_ring(self) -> tuple[np.ndarray, ...]:
        if "one_ring" not in self._cache:
            self._cache["one_ring"] = one_ring(self)
        return self._cache["one_ring"]

    @property
    def two_ring(self) -> np.ndarray:
        if "two_ring" not in self._cache:
            self._cache["two_ring"] = _two_ring(self)
        return self._cache["two_ring"]

    @property
    def adjacency(self) -> "AdjacencyTables":
        return AdjacencyTables.from_mesh(self)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Sorted (E, 2) array of undirected edges, lower index first."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def face_normals_and_flags(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals plus a boolean mask of degenerate faces (zero normal)."""
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cross, axis=1)
    degenerate = norm < DEGENERATE_AREA
    normals = np.zeros_like(cross)
    ok = ~degenerate
    normals[ok] = cross[ok] / norm[ok, None]
    return normals, degenerate


def face_normals(mesh: TriMesh) -> np.ndarray:
    return face_normals_and_flags(mesh)[0]


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices get the zero vector."""
    v = mesh.vertices
    f = mesh.faces
    # the raw cross product has length 2*area, so summing it is area weighting
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(v)
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    return out


def avg_edge_length(mesh: TriMesh) -> float:
    e = mesh.edges
    if len(e) == 0:
        raise MeshError("mesh has no edges")
    v = mesh.vertices
    return float(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1).mean())


@dataclass(frozen=True)
class AdjacencyTables:
    one_ring: tuple[np.ndarray, ...]
    two_ring_pairs: np.ndarray  # (P, 2), lower index first, lexicographically sorted

    @classmethod
    def from_mesh(cls, mesh: TriMesh) -> "AdjacencyTables":
        return cls(mesh.one_ring, mesh.two_ring)


def one_ring(mesh: TriMesh) -> tuple[np.ndarray, ...]:
    e = mesh.edges
    both = np.concatenate([e, e[:, ::-1]])
    both = both[np.lexsort((both[:, 1], both[:, 0]))]
    splits = np.searchsorted(both[:, 0], np.arange(1, mesh.n_vertices))
    return tuple(np.split(both[:, 1], splits))


def _two_ring(mesh: TriMesh) -> np.ndarray:
    nbrs = [set(r.tolist()) for r in mesh.one_ring]
    pairs = set()
    for i, ni in enumerate(nbrs):
        for j in ni:
            for k in nbrs[j]:
                if k > i and k not in ni:
                    pairs.add((i, k))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def two_ring_pairs(mesh: TriMesh) -> np.ndarray:
    """Vertex pairs at edge-graph distance exactly two, as an (P, 2) array."""
    return mesh.two_ring


def sq_dists(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared distances from each query row to every point; shape (Q, P)."""
    d = points[None, :, :] - np.atleast_2d(query)[:, None, :]
    return np.einsum("qpk,qpk->qp", d, d)


def brute_knn(points: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Reference k-NN by full scan; ties go to the lower index."""
    d2 = sq_dists(points, query)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


class SpatialIndex:
    """k-d tree over a point set whose k-NN results match a brute-force scan exactly.

    The tree proposes candidates; exact squared distances (same formula as
    :func:`brute_knn`) then decide the order, ties to the lower index. If the
    k-th and (k+1)-th candidates are (nearly) tied, the full radius ball is
    rescanned so no tied point outside the proposal can be missed.
    """

    def __init__(self, points):
        self.points = np.array(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, q, k: int) -> np.ndarray:
        return self.query_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), k)[0]

    def query_batch(self, queries, k: int) -> np.ndarray:
        n = len(self.points)
        if k > n:
            raise MeshError(f"k={k} exceeds indexed point count {n}")
        if k <= 0:
            raise MeshError("k must be positive")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(queries)):
            raise MeshError("query points must be finite")
        kk = min(k + 1, n)
        _, cand = self._tree.query(queries, k=kk)
        cand = np.asarray(cand).reshape(len(queries), kk)
        if np.any(cand >= n):  # squared distance overflowed
            raise MeshError("query points too far from the indexed points")
        out = np.empty((len(queries), k), dtype=np.int64)
        for qi, (q, c) in enumerate(zip(queries, cand)):
            d2 = sq_dists(self.points[c], q)[0]
            order = np.lexsort((c, d2))
            c, d2 = c[order], d2[order]
            if kk > k and d2[k] <= d2[k - 1] * (1 + 1e-9) + 1e-300:
                r = np.sqrt(d2[k - 1]) * (1 + 1e-6) + 1e-12
                c = np.array(self._tree.query_ball_point(q, r), dtype=np.int64)
                d2 = sq_dists(self.points[c], q)[0]
                order = np.lexsort((c, d2))
                c = c[order]
            out[qi] = c[:k]
        return out


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.query(query, k)


def obj_read(path: str | PathLike) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    if len(rest) < 3:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in rest[:3]])
                elif tag == "f":
                    if len(rest) != 3:
                        raise ValueError(f"only triangular faces supported, got {len(rest)} entries")
                    faces.append([int(tok.split("/")[0]) - 1 for tok in rest])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: malformed line {raw.strip()!r}: {exc}") from None
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def obj_write(mesh: TriMesh, path: str | PathLike) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def grid_mesh(nx: int, ny: int, dx: float = 1.0, dy: float = 1.0) -> TriMesh:
    """Regular nx-by-ny vertex grid in the z=0 plane, CCW seen from +z."""
    xs, ys = np.meshgrid(np.arange(nx) * dx, np.arange(ny) * dy, indexing="xy")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))
