"""Two-stream draping network: body stream, garment stream, local pooling, fusion.

The network maps a skinned garment and a body point cloud to one translation
per garment vertex; the draped garment is the skinned garment plus those
translations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .mesh import SpatialIndex, TriMesh
from .nn import LEAKY_SLOPE, MLP, Linear, Module, param
from .optim import ParamStore
from .skinning import PoseSkeleton, SkinWeights, dqs
from .tensor import ShapeError, Tensor

VARIANTS = ("late", "global", "local")


@dataclass
class ModelConfig:
    variant: str = "local"
    global_body_dim: int = 512
    body_widths: tuple = (64, 128, 512)
    stn_widths: tuple = (64, 128)
    garment_point_width: int = 64
    res_blocks: int = 6
    res_width: int = 64
    conv_heads: int = 8
    garment_global_dim: int = 256
    fusion_widths: tuple = (512, 256, 128)
    knn_k: int = 15
    body_downscale: int = 10
    downscale_pool_neighbors: int = 16
    condition_dim: int = 0
    pool_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.body_widths = tuple(self.body_widths)
        self.stn_widths = tuple(self.stn_widths)
        self.fusion_widths = tuple(self.fusion_widths)
        if len(self.body_widths) != 3 or len(self.stn_widths) != 2 or len(self.fusion_widths) != 3:
            raise ValueError("body_widths and fusion_widths need 3 entries, stn_widths 2")
        sizes = [self.global_body_dim, self.garment_point_width, self.res_width, self.conv_heads,
                 self.garment_global_dim, self.knn_k, self.body_downscale, self.downscale_pool_neighbors,
                 *self.body_widths, *self.stn_widths, *self.fusion_widths]
        if any(int(s) <= 0 for s in sizes) or self.res_blocks < 0 or self.condition_dim < 0:
            raise ValueError("all widths and neighborhood sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Small widths for gradient checks and fast tests."""
        base = dict(global_body_dim=6, body_widths=(4, 5, 6), stn_widths=(4, 5), garment_point_width=4,
                    res_blocks=1, res_width=4, conv_heads=2, garment_global_dim=5, fusion_widths=(6, 5, 4),
                    knn_k=3, body_downscale=3, downscale_pool_neighbors=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Reduced widths used for the desk-scale training runs."""
        base = dict(global_body_dim=64, body_widths=(32, 64, 64), stn_widths=(32, 64), garment_point_width=32,
                    res_blocks=6, res_width=32, conv_heads=4, garment_global_dim=64, fusion_widths=(128, 64, 32))
        base.update(kw)
        return cls(**base)


@dataclass
class ConvGraph:
    """Directed edges i <- j over each vertex's 1-ring plus itself."""

    src: np.ndarray
    dst: np.ndarray
    inv_count: np.ndarray  # (N, 1)
    n: int

    @classmethod
    def from_mesh(cls, mesh: TriMesh) -> "ConvGraph":
        src, dst = [], []
        for i, ring in enumerate(mesh.one_ring):
            nb = np.concatenate([[i], ring])
            src.append(np.full(len(nb), i))
            dst.append(nb)
        src = np.concatenate(src).astype(np.int64) if src else np.zeros(0, dtype=np.int64)
        dst = np.concatenate(dst).astype(np.int64) if dst else np.zeros(0, dtype=np.int64)
        count = np.bincount(src, minlength=mesh.n_vertices).astype(np.float64)
        return cls(src, dst, (1.0 / count)[:, None], mesh.n_vertices)


class FeaStConv(Module):
    """Mesh convolution with soft head assignment over the 1-ring.

    y_i = b + 1/|N_i| sum_{j in N_i} sum_m q_m(x_i, x_j) W_m x_j, with
    q = softmax_m(u_m . (x_i - x_j) + c_m) and N_i the 1-ring plus i. Vertex
    positions are appended to the input features.
    """

    def __init__(self, d_in: int, d_out: int, heads: int, rng):
        d = d_in + 3
        self.heads, self.d_out = heads, d_out
        std = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2) / d)
        self.W = param(rng.normal(0.0, std, size=(d, heads * d_out)))
        self.u = param(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, heads)))
        self.c = param(np.zeros(heads))
        self.b = param(np.zeros(d_out))

    def __call__(self, x: Tensor, pos: np.ndarray, graph: ConvGraph) -> Tensor:
        if x.shape[0] != graph.n or len(pos) != graph.n:
            raise ShapeError(f"feastnet_conv: features {x.shape}, positions {np.shape(pos)}, graph of {graph.n}")
        xin = T.concat_cols([x, pos])
        if xin.shape[1] != self.W.shape[0]:
            raise ShapeError(f"feastnet_conv: input width {xin.shape[1]} != {self.W.shape[0]}")
        xu = T.matmul(xin, self.u)
        logits = T.gather_rows(xu, graph.src) - T.gather_rows(xu, graph.dst) + self.c
        q = T.softmax_rows(logits)
        z = T.reshape(T.matmul(xin, self.W), (graph.n, self.heads, self.d_out))
        msg = T.head_mix(q, z, graph.dst)
        return T.scatter_sum(msg, graph.src, graph.n) * graph.inv_count + self.b


def feastnet_conv(features: Tensor, positions: np.ndarray, graph: ConvGraph, conv: FeaStConv) -> Tensor:
    return conv(features, positions, graph)


class STN(Module):
    """Predicts a d x d transform (identity + learned residual) and applies it to the rows."""

    def __init__(self, d: int, widths, rng):
        self.d = d
        self.point_mlp = MLP([d, *widths], rng)
        self.head = MLP([widths[-1], widths[0], d * d], rng, last_linear=True, zero_last=True)

    def matrix(self, x: Tensor) -> Tensor:
        pooled = T.row_max_pool(self.point_mlp(x))
        return T.reshape(self.head(pooled), (self.d, self.d)) + np.eye(self.d)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d:
            raise ShapeError(f"stn: expected {self.d} columns, got {x.shape}")
        return T.matmul(x, self.matrix(x))


def stn(x: Tensor, module: STN) -> Tensor:
    return module(x)


class BodyStream(Module):
    def __init__(self, cfg: ModelConfig, rng):
        w0, w1, w2 = cfg.body_widths
        self.stn_in = STN(3, cfg.stn_widths, rng)
        self.block1 = MLP([3, w0, w0], rng)
        self.stn_feat = STN(w0, cfg.stn_widths, rng)
        self.block2 = MLP([w0 + 3, w1, w2], rng)
        self.global_proj = Linear(w2, cfg.global_body_dim, rng)

    def __call__(self, points: Tensor) -> tuple[Tensor, Tensor]:
        x = self.stn_in(points)
        f = self.stn_feat(self.block1(x))
        pointwise = self.block2(T.concat_cols([f, x]))
        glob = T.leaky_relu(self.global_proj(T.row_max_pool(pointwise)), LEAKY_SLOPE)
        return pointwise, glob


class ResBlock(Module):
    def __init__(self, d_in: int, d_out: int, heads: int, rng):
        self.conv1 = FeaStConv(d_in, d_out, heads, rng)
        self.conv2 = FeaStConv(d_out, d_out, heads, rng)
        self.proj = Linear(d_in, d_out, rng) if d_in != d_out else None

    def __call__(self, x: Tensor, pos: np.ndarray, graph: ConvGraph) -> Tensor:
        h = T.leaky_relu(self.conv1(x, pos, graph), LEAKY_SLOPE)
        h = self.conv2(h, pos, graph)
        skip = self.proj(x) if self.proj is not None else x
        return T.leaky_relu(h + skip, LEAKY_SLOPE)


class GarmentStream(Module):
    def __init__(self, cfg: ModelConfig, rng, with_conv: bool):
        g, w = cfg.global_body_dim, cfg.garment_point_width
        self.stn_in = STN(3, cfg.stn_widths, rng)
        self.point_block = MLP([3 + g, w, w], rng)
        self.with_conv = with_conv
        self.res = []
        if with_conv:
            d = w
            for _ in range(cfg.res_blocks):
                self.res.append(ResBlock(d, cfg.res_width, cfg.conv_heads, rng))
                d = cfg.res_width
        d_feat = w + (cfg.res_width if with_conv and cfg.res_blocks else (w if with_conv else 0)) + g
        self.global_block = MLP([d_feat, cfg.garment_global_dim], rng)

    def __call__(self, pos: np.ndarray, graph: ConvGraph | None, body_global: Tensor):
        n = len(pos)
        body_rep = T.repeat_rows(body_global, n)
        p = self.stn_in(Tensor(pos))
        pointwise = self.point_block(T.concat_cols([p, body_rep]))
        patchwise = None
        if self.with_conv:
            h = pointwise
            for block in self.res:
                h = block(h, pos, graph)
            patchwise = h
            feats = T.concat_cols([pointwise, patchwise, body_rep])
        else:
            feats = T.concat_cols([pointwise, body_rep])
        glob = T.row_max_pool(self.global_block(feats))
        return pointwise, patchwise, glob


@dataclass
class PoolingIndex:
    """Static neighbor structure of the local body pooling for one scene."""

    seed_idx: np.ndarray  # (S,) body points chosen as seeds
    seed_nbrs: np.ndarray  # (S, k_avg) body points averaged into each seed
    seed_pos: np.ndarray  # (S, 3)
    garment_nbrs: np.ndarray  # (N, k) seeds max-pooled into each garment vertex


def downsample_seeds(n_body: int, factor: int, seed: int) -> np.ndarray:
    """Deterministic seeded shuffle of the body points, then every ``factor``-th one."""
    perm = np.random.default_rng(seed).permutation(n_body)
    return perm[::factor]


def local_pooling_index(garment_vertices: np.ndarray, body_points: np.ndarray, cfg: ModelConfig,
                        seed_idx: np.ndarray | None = None) -> PoolingIndex:
    body_points = np.asarray(body_points, dtype=np.float64)
    if seed_idx is None:
        seed_idx = downsample_seeds(len(body_points), cfg.body_downscale, cfg.pool_seed)
    seed_idx = np.asarray(seed_idx, dtype=np.int64)
    body_index = SpatialIndex(body_points)
    k_avg = min(cfg.downscale_pool_neighbors, len(body_points))
    seed_nbrs = body_index.query_batch(body_points[seed_idx], k_avg)
    seed_pos = body_points[seed_nbrs].mean(axis=1)
    k = min(cfg.knn_k, len(seed_idx))
    garment_nbrs = SpatialIndex(seed_pos).query_batch(garment_vertices, k)
    return PoolingIndex(seed_idx, seed_nbrs, seed_pos, garment_nbrs)


def local_body_pooling(body_pointwise: Tensor, index: PoolingIndex) -> Tensor:
    """Average body features into seeds, then max-pool the nearest seeds per garment vertex."""
    seed_feat = T.reduce_mean(T.gather_rows(body_pointwise, index.seed_nbrs), axis=1)
    return T.reduce_max(T.gather_rows(seed_feat, index.garment_nbrs), axis=1)


class Fusion(Module):
    def __init__(self, d_in: int, cfg: ModelConfig, rng):
        self.condition_dim = cfg.condition_dim
        self.mlp = MLP([d_in + cfg.condition_dim, *cfg.fusion_widths, 3], rng, last_linear=True, zero_last=True)

    def __call__(self, per_vertex: Tensor, condition=None) -> Tensor:
        n = per_vertex.shape[0]
        if self.condition_dim:
            if condition is None or np.size(condition) != self.condition_dim:
                got = 0 if condition is None else np.size(condition)
                raise ShapeError(f"fusion: condition has length {got}, expected {self.condition_dim}")
            cond = np.broadcast_to(np.asarray(condition, dtype=np.float64).reshape(1, -1), (n, self.condition_dim))
            per_vertex = T.concat_cols([per_vertex, cond])
        elif condition is not None and np.size(condition):
            raise ShapeError(f"fusion: got a condition of length {np.size(condition)} but condition_dim is 0")
        return self.mlp(per_vertex)


@dataclass
class SceneInputs:
    """Network inputs for one scene with their static neighbor structures precomputed."""

    skinned: np.ndarray  # (N, 3)
    body_points: np.ndarray  # (N_B, 3)
    graph: ConvGraph
    pooling: PoolingIndex | None = None
    condition: np.ndarray | None = None


def prepare_inputs(skinned: TriMesh, body_points: np.ndarray, cfg: ModelConfig, condition=None,
                   seed_idx=None) -> SceneInputs:
    body_points = np.asarray(body_points, dtype=np.float64).reshape(-1, 3)
    pooling = None
    if cfg.variant == "local":
        pooling = local_pooling_index(skinned.vertices, body_points, cfg, seed_idx)
    cond = None if condition is None else np.asarray(condition, dtype=np.float64).ravel()
    return SceneInputs(np.asarray(skinned.vertices), body_points, ConvGraph.from_mesh(skinned), pooling, cond)


class DrapeNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.body = BodyStream(cfg, rng)
        self.garment = GarmentStream(cfg, rng, with_conv=cfg.variant != "late")
        d = cfg.garment_point_width + cfg.garment_global_dim + cfg.global_body_dim
        if cfg.variant != "late":
            d += cfg.res_width if cfg.res_blocks else cfg.garment_point_width
        if cfg.variant == "local":
            d += cfg.body_widths[2]
        self.fusion = Fusion(d, cfg, rng)
        self._store = None

    @property
    def params(self) -> ParamStore:
        if self._store is None:
            self._store = ParamStore(dict(self.named_parameters()))
        return self._store

    def features(self, inputs: SceneInputs) -> Tensor:
        n = len(inputs.skinned)
        body_pointwise, body_global = self.body(Tensor(inputs.body_points))
        pointwise, patchwise, garment_global = self.garment(inputs.skinned, inputs.graph, body_global)
        parts = [pointwise]
        if patchwise is not None:
            parts.append(patchwise)
        parts += [T.repeat_rows(garment_global, n), T.repeat_rows(body_global, n)]
        if self.cfg.variant == "local":
            if inputs.pooling is None:
                raise ValueError("local variant needs a pooling index (see prepare_inputs)")
            parts.append(local_body_pooling(body_pointwise, inputs.pooling))
        return T.concat_cols(parts)

    def __call__(self, inputs: SceneInputs) -> Tensor:
        """(N, 3) predicted translations."""
        return self.fusion(self.features(inputs), inputs.condition)

    def predict_positions(self, inputs: SceneInputs) -> np.ndarray:
        return inputs.skinned + self(inputs).data


def predict(template: TriMesh, body: TriMesh, pose: PoseSkeleton, weights: SkinWeights, model: DrapeNet,
            condition=None) -> TriMesh:
    """Skin the template, then add the predicted per-vertex translations."""
    skinned = dqs(template, pose, weights)
    inputs = prepare_inputs(skinned, body.vertices, model.cfg, condition)
    return skinned.with_vertices(model.predict_positions(inputs))
