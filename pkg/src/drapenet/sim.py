"""Quasi-static position-based cloth draping on capsule-skeleton bodies.

This is the ground-truth generator. Bodies are unions of capsules hung on a
humanoid skeleton; garments are triangulated templates with a pinned rim.
The solver is Gauss-Seidel PBD with a fixed constraint order, so a given
input always produces bit-identical output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .mesh import TriMesh, avg_edge_length, grid_mesh, two_ring_pairs
from .skinning import PoseSkeleton, RigidTransform, SkinWeights, distance_weights


class SimError(ValueError):
    pass


# name, parent, rest position at height_scale 1 (y up, z forward, x to the body's left)
JOINTS = [
    ("pelvis", -1, (0.0, 1.00, 0.0)),
    ("spine", 0, (0.0, 1.18, 0.0)),
    ("chest", 1, (0.0, 1.36, 0.0)),
    ("neck", 2, (0.0, 1.52, 0.0)),
    ("head", 3, (0.0, 1.70, 0.0)),
    ("l_shoulder", 2, (0.19, 1.44, 0.0)),
    ("l_elbow", 5, (0.43, 1.26, 0.0)),
    ("l_wrist", 6, (0.64, 1.08, 0.0)),
    ("r_shoulder", 2, (-0.19, 1.44, 0.0)),
    ("r_elbow", 8, (-0.43, 1.26, 0.0)),
    ("r_wrist", 9, (-0.64, 1.08, 0.0)),
    ("l_hip", 0, (0.10, 0.94, 0.0)),
    ("l_knee", 11, (0.10, 0.52, 0.0)),
    ("l_ankle", 12, (0.10, 0.10, 0.0)),
    ("r_hip", 0, (-0.10, 0.94, 0.0)),
    ("r_knee", 14, (-0.10, 0.52, 0.0)),
    ("r_ankle", 15, (-0.10, 0.10, 0.0)),
]
JOINT_INDEX = {name: j for j, (name, _, _) in enumerate(JOINTS)}

# capsule radius of the bone ending at the named child joint, and whether it is torso (True) or limb
BONE_RADII = {
    "spine": (0.135, True), "chest": (0.14, True), "neck": (0.12, True), "head": (0.095, True),
    "l_shoulder": (0.07, True), "r_shoulder": (0.07, True),
    "l_elbow": (0.05, False), "l_wrist": (0.04, False), "r_elbow": (0.05, False), "r_wrist": (0.04, False),
    "l_hip": (0.10, True), "r_hip": (0.10, True),
    "l_knee": (0.075, False), "l_ankle": (0.055, False), "r_knee": (0.075, False), "r_ankle": (0.055, False),
}

# (low, high) for height_scale, torso_girth, limb_girth
SHAPE_RANGES = ((0.85, 1.15), (0.75, 1.35), (0.75, 1.35))
DEFAULT_SHAPE = (1.0, 1.0, 1.0)

# per-joint local rotation-vector limits (radians) for random poses
POSE_LIMITS = {
    "pelvis": (0.10, 0.30, 0.05),
    "spine": (0.30, 0.15, 0.15),
    "chest": (0.15, 0.10, 0.10),
    "neck": (0.15, 0.15, 0.10),
    "l_shoulder": (0.40, 0.20, 0.50), "r_shoulder": (0.40, 0.20, 0.50),
    "l_elbow": (0.50, 0.30, 0.20), "r_elbow": (0.50, 0.30, 0.20),
    "l_hip": (0.45, 0.10, 0.20), "r_hip": (0.45, 0.10, 0.20),
    "l_knee": (0.40, 0.0, 0.0), "r_knee": (0.40, 0.0, 0.0),
}


def rest_skeleton(height_scale: float = 1.0) -> PoseSkeleton:
    parents = tuple(p for _, p, _ in JOINTS)
    rest = tuple(RigidTransform(translation=np.array(pos) * height_scale) for _, _, pos in JOINTS)
    return PoseSkeleton(parents, rest, tuple(RigidTransform() for _ in JOINTS), tuple(n for n, _, _ in JOINTS))


def random_local_rotations(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """(J, 3) local rotation vectors drawn uniformly within the per-joint limits."""
    local = np.zeros((len(JOINTS), 3))
    for name, lim in POSE_LIMITS.items():
        local[JOINT_INDEX[name]] = rng.uniform(-1.0, 1.0, size=3) * np.array(lim) * scale
    return local


def random_pose(skeleton: PoseSkeleton, rng: np.random.Generator, scale: float = 1.0) -> PoseSkeleton:
    return skeleton.posed_from_local(random_local_rotations(rng, scale))


@dataclass
class SimConfig:
    iterations: int = 8
    tolerance: float = 2e-5
    max_steps: int = 4000
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    dt: float = 1.0 / 60.0
    stretch_stiffness: float = 1.0
    bend_stiffness: float = 0.1
    collision_margin: float | None = None  # None: 0.2 * body average edge length

    def __post_init__(self):
        if self.tolerance <= 0 or self.iterations <= 0 or self.max_steps <= 0:
            raise SimError("tolerance, iterations and max_steps must be positive")


@dataclass
class BodyProxy:
    skeleton: PoseSkeleton
    seg_a: np.ndarray  # (C, 3) capsule endpoints in posed space
    seg_b: np.ndarray
    radii: np.ndarray  # (C,)
    mesh: TriMesh | None = None
    shape_params: tuple = DEFAULT_SHAPE

    def signed_distance(self, points) -> np.ndarray:
        return capsule_sdf(np.asarray(points, dtype=np.float64).reshape(-1, 3), self.seg_a, self.seg_b, self.radii)

    def default_margin(self) -> float:
        if self.mesh is None:
            raise SimError("collision margin needs a body tessellation or an explicit value")
        return 0.2 * avg_edge_length(self.mesh)


def capsule_sdf(p: np.ndarray, a: np.ndarray, b: np.ndarray, r: np.ndarray) -> np.ndarray:
    ab = b - a  # (C, 3)
    ap = p[:, None, :] - a[None]  # (N, C, 3)
    denom = np.maximum((ab * ab).sum(-1), 1e-300)
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(p[:, None, :] - closest, axis=-1) - r[None]
    return d.min(axis=1)


def _capsule_surface(length: float, radius: float, n_around: int, spacing: float):
    """Capsule along +z from 0 to ``length``: vertices and CCW-outward faces."""
    n_cap = max(2, int(np.ceil(0.5 * np.pi * radius / spacing)))
    n_cyl = max(1, int(np.ceil(length / spacing)))
    rings = []  # (z, ring radius)
    for i in range(n_cap - 1, 0, -1):
        phi = 0.5 * np.pi * i / n_cap
        rings.append((-radius * np.sin(phi), radius * np.cos(phi)))
    for i in range(n_cyl + 1):
        rings.append((length * i / n_cyl, radius))
    for i in range(1, n_cap):
        phi = 0.5 * np.pi * i / n_cap
        rings.append((length + radius * np.sin(phi), radius * np.cos(phi)))
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts = [(0.0, 0.0, -radius)]
    for z, rr in rings:
        verts += [(rr * np.cos(t), rr * np.sin(t), z) for t in ang]
    verts.append((0.0, 0.0, length + radius))
    faces = []
    top = len(verts) - 1
    for k in range(n_around):
        faces.append((0, 1 + (k + 1) % n_around, 1 + k))
    for ri in range(len(rings) - 1):
        base0 = 1 + ri * n_around
        base1 = base0 + n_around
        for k in range(n_around):
            k1 = (k + 1) % n_around
            faces.append((base0 + k, base0 + k1, base1 + k1))
            faces.append((base0 + k, base1 + k1, base1 + k))
    last = 1 + (len(rings) - 1) * n_around
    for k in range(n_around):
        faces.append((last + k, last + (k + 1) % n_around, top))
    return np.array(verts), np.array(faces, dtype=np.int64)


def _frame_to(direction: np.ndarray) -> np.ndarray:
    """Rotation matrix whose third column is the unit ``direction``."""
    z = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def generate_body(shape_params=DEFAULT_SHAPE, pose: PoseSkeleton | None = None, n_around: int = 10,
                  spacing: float = 0.06) -> BodyProxy:
    """Capsule body for (height_scale, torso_girth, limb_girth), posed by ``pose``.

    ``pose`` supplies the skinning transforms; its rest joints must be those of
    ``rest_skeleton(height_scale)``. The tessellation is built in the rest pose
    and moved rigidly with each bone, so vertex count never depends on pose.
    """
    shape = tuple(float(s) for s in shape_params)
    if len(shape) != 3:
        raise SimError(f"expected 3 shape params, got {len(shape)}")
    for value, (lo, hi), name in zip(shape, SHAPE_RANGES, ("height_scale", "torso_girth", "limb_girth")):
        if not lo <= value <= hi:
            raise SimError(f"{name}={value} outside [{lo}, {hi}]")
    height, torso, limb = shape
    rest = rest_skeleton(height)
    if pose is None:
        pose = rest
    elif not np.allclose(pose.rest_positions(), rest.rest_positions(), atol=1e-9):
        raise SimError("pose skeleton does not match the body's rest joints")
    rest_pos = rest.rest_positions()
    seg_a, seg_b, radii, verts, faces = [], [], [], [], []
    offset = 0
    for p, c in rest.bones():
        base_r, is_torso = BONE_RADII[rest.names[c]]
        r = base_r * (torso if is_torso else limb)
        a0, b0 = rest_pos[p], rest_pos[c]
        xf = pose.pose[p]
        seg_a.append(xf.apply(a0))
        seg_b.append(xf.apply(b0))
        radii.append(r)
        v, f = _capsule_surface(float(np.linalg.norm(b0 - a0)), r, n_around, spacing)
        v = v @ _frame_to(b0 - a0).T + a0
        verts.append(xf.apply(v))
        faces.append(f + offset)
        offset += len(v)
    mesh = TriMesh(np.concatenate(verts), np.concatenate(faces))
    return BodyProxy(pose, np.array(seg_a), np.array(seg_b), np.array(radii), mesh, shape)


@dataclass
class GarmentTemplate:
    kind: str
    mesh: TriMesh
    weights: SkinWeights
    pinned: np.ndarray  # vertex indices held at their skinned position
    size_params: tuple = ()
    rest_lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        e = self.mesh.edges
        self.rest_lengths = np.linalg.norm(self.mesh.vertices[e[:, 0]] - self.mesh.vertices[e[:, 1]], axis=1)


def _tube(n_around: int, n_along: int, radius: float, y_top: float, length: float, center=(0.0, 0.0)):
    """Open cylinder around the y axis, rings from y_top downward, normals outward."""
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts = []
    for j in range(n_along):
        y = y_top - length * j / max(n_along - 1, 1)
        verts += [(center[0] + radius * np.sin(t), y, center[1] + radius * np.cos(t)) for t in ang]
    faces = []
    for j in range(n_along - 1):
        for i in range(n_around):
            a = j * n_around + i
            b = j * n_around + (i + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [(a, c, d), (a, d, b)]
    return np.array(verts), np.array(faces, dtype=np.int64)


def generate_garment_template(kind: str = "grid", nx: int = 20, ny: int = 20, size_params=(1.0, 1.0),
                              max_influences: int = 4, falloff: float = 0.12) -> GarmentTemplate:
    """Garment templates in the default rest pose.

    * ``grid``: nx-by-ny cape hung behind the back on a circular arc, top row pinned.
    * ``tube``: skirt with nx vertices around and ny rings, waist ring pinned.
    * ``tshirt``: torso tube plus two sleeve tubes, top rings pinned.

    ``size_params`` = (width scale, length scale), the sewing-pattern analog.
    """
    if nx < 2 or ny < 2:
        raise SimError("template resolution must be at least 2x2")
    width, length = (float(s) for s in size_params)
    if width <= 0 or length <= 0:
        raise SimError("size params must be positive")
    skel = rest_skeleton()
    if kind == "grid":
        g = grid_mesh(nx, ny)
        u = g.vertices[:, 0] / (nx - 1) - 0.5  # -0.5..0.5 across
        s = g.vertices[:, 1] / (ny - 1)  # 0 at the top row
        radius = 0.19
        theta = u * 0.5 * width / radius
        verts = np.stack([radius * np.sin(theta), 1.46 - 0.80 * length * s, -radius * np.cos(theta)], axis=1)
        # grid faces are CCW from +z; on the back the outward side is -z
        mesh = TriMesh(verts, g.faces[:, ::-1])
        pinned = np.flatnonzero(s == 0.0)
    elif kind == "tube":
        v, f = _tube(nx, ny, 0.21 * width, 1.02, 0.50 * length)
        mesh = TriMesh(v, f)
        pinned = np.arange(nx)
    elif kind == "tshirt":
        v0, f0 = _tube(nx, ny, 0.20 * width, 1.46, 0.50 * length)
        n_sleeve = max(6, nx // 2)
        rings = max(2, ny // 3)
        parts_v, parts_f, pins = [v0], [f0], list(range(nx))
        offset = len(v0)
        for side in (1.0, -1.0):
            sv, sf = _tube(n_sleeve, rings, 0.075 * width, 0.0, 0.22 * length)
            # lay the tube along the upper arm: local -y becomes the shoulder-to-elbow direction
            d = np.array(JOINTS[JOINT_INDEX["l_elbow"]][2]) - np.array(JOINTS[JOINT_INDEX["l_shoulder"]][2])
            d[0] *= side
            axis = d / np.linalg.norm(d)
            R = _frame_to(axis) @ np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
            start = np.array(JOINTS[JOINT_INDEX["l_shoulder"]][2]) * np.array([side, 1.0, 1.0])
            sv = sv @ R.T + start
            if side < 0:
                sf = sf[:, ::-1]
            parts_v.append(sv)
            parts_f.append(sf + offset)
            pins += list(range(offset, offset + n_sleeve))
            offset += len(sv)
        mesh = TriMesh(np.concatenate(parts_v), np.concatenate(parts_f))
        pinned = np.array(pins)
    else:
        raise SimError(f"unknown garment kind {kind!r}")
    weights = distance_weights(mesh, skel, max_influences=max_influences, falloff=falloff)
    return GarmentTemplate(kind, mesh, weights, np.asarray(pinned, dtype=np.int64), (width, length))


@numba.njit(cache=True)
def _dist(x, i, j):
    dx = x[i, 0] - x[j, 0]
    dy = x[i, 1] - x[j, 1]
    dz = x[i, 2] - x[j, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


@numba.njit(cache=True)
def pair_lengths(x, pairs):
    out = np.empty(len(pairs))
    for k in range(len(pairs)):
        out[k] = _dist(x, pairs[k, 0], pairs[k, 1])
    return out


@numba.njit(cache=True)
def _project_pairs(x, w, pairs, rest, stiffness):
    for k in range(len(pairs)):
        i = pairs[k, 0]
        j = pairs[k, 1]
        wsum = w[i] + w[j]
        if wsum == 0.0:
            continue
        d = _dist(x, i, j)
        c = d - rest[k]
        if d < 1e-12 or abs(c) < 1e-13:
            continue
        s = stiffness * c / (wsum * d)
        for a in range(3):
            delta = s * (x[j, a] - x[i, a])
            x[i, a] += w[i] * delta
            x[j, a] -= w[j] * delta


@numba.njit(cache=True)
def _nearest_capsule(p, seg_a, seg_b, radii):
    best = np.inf
    gx, gy, gz = 0.0, 1.0, 0.0
    for c in range(len(radii)):
        abx = seg_b[c, 0] - seg_a[c, 0]
        aby = seg_b[c, 1] - seg_a[c, 1]
        abz = seg_b[c, 2] - seg_a[c, 2]
        apx = p[0] - seg_a[c, 0]
        apy = p[1] - seg_a[c, 1]
        apz = p[2] - seg_a[c, 2]
        den = abx * abx + aby * aby + abz * abz
        t = 0.0
        if den > 0.0:
            t = (apx * abx + apy * aby + apz * abz) / den
            t = min(1.0, max(0.0, t))
        dx = apx - t * abx
        dy = apy - t * aby
        dz = apz - t * abz
        n = np.sqrt(dx * dx + dy * dy + dz * dz)
        sd = n - radii[c]
        if sd < best:
            best = sd
            if n > 1e-15:
                gx, gy, gz = dx / n, dy / n, dz / n
            else:
                gx, gy, gz = 0.0, 1.0, 0.0
    return best, gx, gy, gz


@numba.njit(cache=True)
def _collide(x, seg_a, seg_b, radii, margin, passes):
    for i in range(len(x)):
        for _ in range(passes):
            sd, gx, gy, gz = _nearest_capsule(x[i], seg_a, seg_b, radii)
            if sd >= margin:
                break
            push = margin - sd
            x[i, 0] += push * gx
            x[i, 1] += push * gy
            x[i, 2] += push * gz


@numba.njit(cache=True)
def _solve(x, w, edges, edge_rest, bends, bend_rest, seg_a, seg_b, radii, gravity_step,
           iterations, k_stretch, k_bend, margin, tol, max_steps):
    prev = x.copy()
    for step in range(max_steps):
        prev[:] = x
        for i in range(len(x)):
            if w[i] > 0.0:
                for a in range(3):
                    x[i, a] += gravity_step[a]
        for _ in range(iterations):
            _project_pairs(x, w, edges, edge_rest, k_stretch)
            if k_bend > 0.0:
                _project_pairs(x, w, bends, bend_rest, k_bend)
        _collide(x, seg_a, seg_b, radii, margin, 16)
        disp = 0.0
        for i in range(len(x)):
            dx = x[i, 0] - prev[i, 0]
            dy = x[i, 1] - prev[i, 1]
            dz = x[i, 2] - prev[i, 2]
            disp = max(disp, np.sqrt(dx * dx + dy * dy + dz * dz))
        if disp < tol:
            return step + 1, disp, True
    return max_steps, disp, False


@dataclass
class DrapeResult:
    mesh: TriMesh
    converged: bool
    steps: int
    last_displacement: float


def drape(garment: TriMesh, body: BodyProxy, config: SimConfig | None = None, rest: TriMesh | None = None,
          pinned=None) -> DrapeResult:
    """Settle ``garment`` (already skinned to the body pose) under gravity on ``body``.

    Rest lengths come from ``rest`` (the template; defaults to ``garment``
    itself). Pinned vertices ignore gravity and cloth constraints but are
    still pushed out of the body.
    """
    config = config or SimConfig()
    rest = rest if rest is not None else garment
    if rest.n_vertices != garment.n_vertices or not np.array_equal(rest.faces, garment.faces):
        raise SimError("rest mesh topology differs from the garment")
    margin = config.collision_margin if config.collision_margin is not None else body.default_margin()
    x = np.array(garment.vertices, dtype=np.float64)
    w = np.ones(len(x))
    if pinned is not None:
        w[np.asarray(pinned, dtype=np.int64)] = 0.0
    edges = rest.edges
    bends = two_ring_pairs(rest)
    edge_rest = pair_lengths(rest.vertices, edges)
    bend_rest = pair_lengths(rest.vertices, bends)
    g = np.asarray(config.gravity, dtype=np.float64) * config.dt ** 2
    steps, disp, ok = _solve(x, w, edges, edge_rest, bends, bend_rest, body.seg_a, body.seg_b, body.radii, g,
                             config.iterations, config.stretch_stiffness, config.bend_stiffness, margin,
                             config.tolerance, config.max_steps)
    return DrapeResult(garment.with_vertices(x), bool(ok), int(steps), float(disp))


def collision_margin(body: BodyProxy, config: SimConfig) -> float:
    return config.collision_margin if config.collision_margin is not None else body.default_margin()
