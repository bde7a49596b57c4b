import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drapenet import losses as L
from drapenet.losses import (BodyContext, LossWeights, bending_loss, correspondences, normal_loss, penetration_loss,
                             total_loss, vertex_loss)
from drapenet.mesh import TriMesh, brute_knn, grid_mesh, icosphere
from drapenet.tensor import ShapeError, Tensor
from scipy.spatial.transform import Rotation


def flat_body():
    """Square plate in z=0 with normals +z; avg edge length (4 + sqrt 2) / 5."""
    return TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def test_vertex_loss_examples():
    g = np.zeros((2, 3))
    assert float(vertex_loss(g, g).data) == 0.0
    assert float(vertex_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3))).data) == 1.0
    assert float(vertex_loss(np.array([[1.0, 0, 0], [0, 2.0, 0]]), g).data) == 2.5
    with pytest.raises(ShapeError):
        vertex_loss(np.zeros((3, 3)), g)


def test_correspondence_examples(rng):
    body = icosphere(1)
    ctx = BodyContext.from_mesh(body)
    assert correspondences(ctx, body.vertices[[7]]).tolist() == [7]
    tie = TriMesh([[1, 0, 0], [-1, 0, 0], [0, 5, 0]], [[0, 1, 2]])
    assert correspondences(tie, np.zeros((1, 3))).tolist() == [0]
    q = rng.normal(size=(40, 3))
    assert np.array_equal(correspondences(ctx, q), brute_knn(body.vertices, q, 1)[:, 0])


def test_penetration_examples():
    body = flat_body()
    ctx = BodyContext.from_mesh(body)
    lift = 0.2 * (4 + np.sqrt(2)) / 5  # extended plane height
    on_plane = np.array([[0.0, 0.0, lift]])
    assert float(penetration_loss(ctx, on_plane, on_plane).data) == 0.0
    inside = np.array([[0.0, 0.0, lift - 0.1]])
    pairs = np.array([0])
    # gate open: gt within d_tol of pred
    got = float(penetration_loss(ctx, inside, inside + [0, 0, 0.01], pairs=pairs).data)
    assert abs(got - 0.1 / 1) < 1e-12
    two = np.vstack([inside, [[1.0, 1.0, 1.0]]])
    got = float(penetration_loss(ctx, two, two, pairs=np.array([0, 2])).data)
    assert abs(got - 0.1 / 2) < 1e-12
    deep = np.array([[0.0, 0.0, -0.5]])
    assert float(penetration_loss(ctx, deep, deep + [0, 0, 0.2], pairs=pairs).data) == 0.0


def test_penetration_monotone_along_negative_normal():
    ctx = BodyContext.from_mesh(flat_body())
    pairs = np.array([0])
    gt = np.array([[0.0, 0.0, 0.0]])
    vals = [float(penetration_loss(ctx, gt + [0, 0, z], gt, pairs=pairs).data) for z in np.linspace(0.04, -0.04, 17)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_normal_loss_examples():
    tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert float(normal_loss(tri.vertices, tri).data) == 0.0
    flipped = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=float)
    assert abs(float(normal_loss(flipped, tri).data) - 4.0) < 1e-12
    ortho = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert abs(float(normal_loss(ortho, tri).data) - 1.0) < 1e-12


def test_normal_loss_skips_degenerate():
    g = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], [[0, 1, 2], [0, 1, 3]])
    pred = g.vertices.copy()
    pred[2] = [0, -1, 0]  # flip the only non-degenerate face
    assert abs(float(normal_loss(pred, g).data) - 4.0) < 1e-12


def test_bending_examples(caplog):
    g = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0.5, 1, 0], [1.5, 1, 0]], [[0, 1, 3], [1, 2, 4]])
    pairs = np.array([[0, 2]])
    assert float(bending_loss(g.vertices, g, pairs).data) == 0.0
    pred = g.vertices.copy()
    pred[2, 0] = 3.0
    assert abs(float(bending_loss(pred, g, pairs).data) - 1.0) < 1e-12
    assert float(bending_loss(g.vertices + 5.0, g, pairs).data) == 0.0
    with caplog.at_level(logging.WARNING):
        assert float(bending_loss(pred, g, np.zeros((0, 2), dtype=np.int64)).data) == 0.0
    assert "empty" in caplog.text


def test_total_loss_examples(rng):
    body = icosphere(1, radius=0.3)
    ctx = BodyContext.from_mesh(body)
    g = grid_mesh(4, 3, 0.05, 0.05)
    gt = g.with_vertices(g.vertices + [0, 0, 1.0])
    out = total_loss(gt.vertices, gt, ctx, gt.two_ring)
    assert float(out.total.data) == 0.0
    # a rigid shift keeps normals and two-ring distances, and far from the body the gate-pen term is 0
    shifted = gt.vertices + [0.01, 0.0, 0.0]
    out = total_loss(shifted, gt, ctx, gt.two_ring)
    assert out.pen == 0.0 and out.norm < 1e-30 and out.bend < 1e-15
    assert abs(float(out.total.data) - out.vertex) < 1e-15


def test_total_loss_gradcheck_12_vertex_garment():
    from drapenet.gradcheck import grad_check, max_error

    rng = np.random.default_rng(11)
    body = icosphere(1, radius=0.25)  # 42 vertices
    ctx = BodyContext.from_mesh(body)
    g = grid_mesh(4, 3, 0.08, 0.08)
    gt = g.with_vertices(g.vertices - g.vertices.mean(axis=0) + [0, 0, 0.27] + rng.normal(scale=0.005, size=(12, 3)))
    p = Tensor(gt.vertices + rng.normal(scale=0.01, size=(12, 3)))
    corr = correspondences(ctx, p.data)
    rows = grad_check(lambda: total_loss(p, gt, ctx, gt.two_ring, correspondence=corr).total, {"pred": p})
    assert max_error(rows) < 1e-4


@given(st.integers(0, 2**31))
def test_terms_nonnegative_and_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    g = grid_mesh(4, 4, 0.1, 0.1)
    gt = g.with_vertices(g.vertices + rng.normal(scale=0.02, size=(16, 3)))
    pred = gt.vertices + rng.normal(scale=0.02, size=(16, 3))
    pairs = gt.two_ring
    ctx = BodyContext.from_mesh(icosphere(1, radius=0.3))
    out = total_loss(pred, gt, ctx, pairs)
    assert min(out.vertex, out.pen, out.norm, out.bend) >= 0
    R = Rotation.random(random_state=seed % 2**32).as_matrix()
    t = rng.normal(size=3)
    gt2 = gt.with_vertices(gt.vertices @ R.T + t)
    pred2 = pred @ R.T + t
    for fn in (vertex_loss, lambda p, q: bending_loss(p, q, pairs), normal_loss):
        assert abs(float(fn(pred2, gt2).data) - float(fn(pred, gt).data)) < 1e-12


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.pen, w.norm, w.bend, w.d_tol, w.normal_extension_frac) == (1.0, 0.3, 0.5, 0.05, 0.2)
    with pytest.raises(ValueError):
        LossWeights(norm=-1.0)


def test_pairing_and_gate_are_not_differentiated():
    ctx = BodyContext.from_mesh(flat_body())
    p = Tensor(np.array([[0.3, 0.3, 0.0]]), requires_grad=True)
    from drapenet.tensor import backward

    backward(penetration_loss(ctx, p, p.data.copy()))
    # gradient is exactly -normal / N from the ReLU argument
    assert np.allclose(p.grad, [[0, 0, -1.0]], atol=1e-15)
    assert L.CORRESPONDENCE_CALLS > 0
