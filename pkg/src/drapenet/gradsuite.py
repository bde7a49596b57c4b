"""Registered finite-difference checks for every differentiable op, layer and loss term.

Each case builds a random small instance and returns (fn, params); ``fn``
reduces the op's output to a scalar through a fixed random projection so every
output entry contributes to the checked gradient. Instances keep inputs away
from kinks (|x| near 0 for relu/abs, ties for max) where central differences
are not meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .gradcheck import grad_check, max_error
from .mesh import TriMesh, grid_mesh, icosphere
from .model import STN, ConvGraph, FeaStConv
from .tensor import Tensor

CASES: dict[str, Callable] = {}


def case(name):
    def deco(fn):
        CASES[name] = fn
        return fn
    return deco


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _unary(name, op, sample=lambda rng, s: rng.normal(size=s)):
    @case(name)
    def build(rng):
        x = Tensor(sample(rng, (4, 3)))
        w = rng.normal(size=op(x).shape)
        return (lambda: T.reduce_sum(op(x) * w)), {"x": x}


def _binary(name, op, b_sample=lambda rng, s: rng.normal(size=s)):
    @case(name)
    def build(rng):
        a = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(b_sample(rng, (1, 3)))  # broadcast along rows
        w = rng.normal(size=(4, 3))
        return (lambda: T.reduce_sum(op(a, b) * w)), {"a": a, "b": b}


_binary("add", T.add)
_binary("sub", T.sub)
_binary("mul", T.mul)
_binary("div", T.div, _away_from_zero)
_unary("square", T.square)
_unary("sqrt", lambda x: T.sqrt(x, 1e-12), lambda rng, s: rng.uniform(0.2, 2.0, size=s))
_unary("absolute", T.absolute, _away_from_zero)
_unary("exp", T.exp)
_unary("relu", T.relu, _away_from_zero)
_unary("leaky_relu", T.leaky_relu, _away_from_zero)
_unary("softmax_rows", T.softmax_rows)
_unary("reshape", lambda x: T.reshape(x, (3, 4)))
_unary("reduce_sum", lambda x: T.reshape(T.reduce_sum(x, axis=0), (1, 3)))
_unary("reduce_mean", lambda x: T.reduce_mean(x, axis=1, keepdims=True))
_unary("reduce_max", lambda x: T.reduce_max(x, axis=1))
_unary("row_max_pool", T.row_max_pool)
_unary("row_avg_pool", T.row_avg_pool)
_unary("gather_rows", lambda x: T.gather_rows(x, np.array([3, 0, 0, 2, 1])))
_unary("scatter_sum", lambda x: T.scatter_sum(x, np.array([1, 0, 1, 4]), 5))
_unary("index", lambda x: T.index(x, (np.array([0, 2, 2]), np.array([1, 0, 0]))))
_unary("row_norm", lambda x: T.row_norm(x, 1e-12))


@case("matmul")
def _matmul(rng):
    a, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 5)))
    w = rng.normal(size=(4, 5))
    return (lambda: T.reduce_sum(T.matmul(a, b) * w)), {"a": a, "b": b}


@case("linear")
def _linear(rng):
    x, W, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=5))
    w = rng.normal(size=(4, 5))
    return (lambda: T.reduce_sum(T.linear(x, W, b) * w)), {"x": x, "W": W, "b": b}


@case("concat")
def _concat(rng):
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 3)))
    w = rng.normal(size=(6, 3))
    return (lambda: T.reduce_sum(T.concat([a, b], axis=0) * w)), {"a": a, "b": b}


@case("concat_cols")
def _concat_cols(rng):
    a, b = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 5))
    return (lambda: T.reduce_sum(T.concat_cols([a, b]) * w)), {"a": a, "b": b}


@case("repeat_rows")
def _repeat(rng):
    x = Tensor(rng.normal(size=(1, 3)))
    w = rng.normal(size=(5, 3))
    return (lambda: T.reduce_sum(T.repeat_rows(x, 5) * w)), {"x": x}


@case("head_mix")
def _head_mix(rng):
    q, z = Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=(4, 2, 3)))
    idx = rng.integers(0, 4, size=6)
    w = rng.normal(size=(6, 3))
    return (lambda: T.reduce_sum(T.head_mix(q, z, idx) * w)), {"q": q, "z": z}


@case("cross_rows")
def _cross(rng):
    a, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    return (lambda: T.reduce_sum(T.cross_rows(a, b) * w)), {"a": a, "b": b}


@case("feastnet_conv")
def _conv(rng):
    mesh = grid_mesh(3, 3, 0.1, 0.1)
    pos = mesh.vertices + rng.normal(scale=0.02, size=mesh.vertices.shape)
    conv = FeaStConv(2, 3, 2, rng)
    conv.c.data = rng.normal(size=conv.c.shape)
    conv.b.data = rng.normal(size=conv.b.shape)
    x = Tensor(rng.normal(size=(mesh.n_vertices, 2)))
    graph = ConvGraph.from_mesh(mesh)
    w = rng.normal(size=(mesh.n_vertices, 3))
    params = {"x": x, **dict(conv.named_parameters())}
    return (lambda: T.reduce_sum(conv(x, pos, graph) * w)), params


@case("stn")
def _stn(rng):
    module = STN(3, (4, 5), rng)
    last = module.head.layers[-1]
    last.W.data = rng.normal(scale=0.3, size=last.W.shape)  # leave the identity start point
    x = Tensor(rng.normal(size=(6, 3)))
    w = rng.normal(size=(6, 3))
    return (lambda: T.reduce_sum(module(x) * w)), {"x": x, **dict(module.named_parameters())}


def _loss_instance(rng):
    """Small cloth patch hovering around a sphere, with gt a perturbation of pred."""
    body = icosphere(1, radius=0.3)
    ctx = L.BodyContext.from_mesh(body)
    g = grid_mesh(4, 4, 0.08, 0.08)
    base = g.vertices - g.vertices.mean(axis=0) + np.array([0.0, 0.0, 0.3])
    gt = TriMesh(base + rng.normal(scale=0.01, size=base.shape), g.faces)
    while True:
        pred = gt.vertices + rng.normal(scale=0.01, size=base.shape)
        pairs = L.correspondences(ctx, pred)
        signed = ((pred - ctx.extended[pairs]) * ctx.normals[pairs]).sum(axis=1)
        gap = np.linalg.norm(pred - gt.vertices, axis=1)
        tp = gt.two_ring
        stretch = np.linalg.norm(pred[tp[:, 0]] - pred[tp[:, 1]], axis=1) - \
            np.linalg.norm(gt.vertices[tp[:, 0]] - gt.vertices[tp[:, 1]], axis=1)
        # keep clear of the relu hinge, the gate edge and the kink of |stretch|
        if (np.abs(signed).min() > 1e-3 and np.abs(gap - L.LossWeights().d_tol).min() > 1e-3
                and np.abs(stretch).min() > 1e-4):
            break
        base = base + np.array([0.0, 0.0, -0.002])
    return ctx, gt, Tensor(pred), pairs


@case("vertex_loss")
def _vertex(rng):
    ctx, gt, p, _ = _loss_instance(rng)
    return (lambda: L.vertex_loss(p, gt)), {"pred": p}


@case("penetration_loss")
def _pen(rng):
    ctx, gt, p, pairs = _loss_instance(rng)
    # push part of the patch below the extended surface so the term is active
    p.data = p.data - np.array([0.0, 0.0, 0.02])
    pairs = L.correspondences(ctx, p.data)
    signed = ((p.data - ctx.extended[pairs]) * ctx.normals[pairs]).sum(axis=1)
    p.data = p.data + np.where(np.abs(signed) < 1e-3, 2e-3, 0.0)[:, None] * ctx.normals[pairs]
    return (lambda: L.penetration_loss(ctx, p, gt, pairs=pairs)), {"pred": p}


@case("normal_loss")
def _normal(rng):
    ctx, gt, p, _ = _loss_instance(rng)
    return (lambda: L.normal_loss(p, gt)), {"pred": p}


@case("bending_loss")
def _bend(rng):
    ctx, gt, p, _ = _loss_instance(rng)
    pairs = gt.two_ring
    return (lambda: L.bending_loss(p, gt, pairs)), {"pred": p}


@case("total_loss")
def _total(rng):
    ctx, gt, p, corr = _loss_instance(rng)
    pairs = gt.two_ring
    return (lambda: L.total_loss(p, gt, ctx, pairs, correspondence=corr).total), {"pred": p}


@dataclass
class SuiteRow:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def run_suite(instances: int = 10, seed: int = 0, names=None, h: float = 1e-5) -> list[SuiteRow]:
    rows = []
    for name in names or CASES:
        t0 = time.perf_counter()
        worst = 0.0
        for k in range(instances):
            rng = np.random.default_rng([seed, k, sum(map(ord, name))])
            fn, params = CASES[name](rng)
            worst = max(worst, max_error(grad_check(fn, params, h)))
        rows.append(SuiteRow(name, instances, worst, time.perf_counter() - t0))
    return rows


def format_table(rows: list[SuiteRow], tol: float = 1e-4) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  instances  max_rel_error  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.instances:>9}  {r.max_rel_error:>13.3e}  {'PASS' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
