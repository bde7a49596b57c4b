import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from drapenet.losses import vertex_loss
from drapenet.metrics import (MetricError, e_dist, e_norm, evaluate_pair, normalized_l2_percent, precision_curve,
                              write_curve_csv)
from drapenet.mesh import TriMesh, grid_mesh

TRI = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def test_e_dist_examples():
    assert e_dist(TRI, TRI) == 0.0
    one = TriMesh([[0.0, 0, 0]], np.zeros((0, 3)))
    assert e_dist(one.with_vertices([[3.0, 4.0, 0.0]]), one) == 5.0
    two = TriMesh(np.zeros((2, 3)), np.zeros((0, 3)))
    assert e_dist(two.with_vertices([[1.0, 0, 0], [0, 3.0, 0]]), two) == 2.0
    with pytest.raises(MetricError):
        e_dist(TRI, two)


def test_e_norm_examples():
    assert e_norm(TRI, TRI) == 0.0
    flipped = TRI.with_vertices([[0, 0, 0], [0, 1, 0], [1, 0, 0]])
    assert abs(e_norm(flipped, TRI) - 180.0) < 1e-9
    ortho = TRI.with_vertices([[0, 0, 0], [1, 0, 0], [0, 0, 1]])
    assert abs(e_norm(ortho, TRI) - 90.0) < 1e-9


def test_normalized_l2_examples():
    g = grid_mesh(3, 3)
    g = g.with_vertices(g.vertices + np.random.default_rng(0).normal(scale=0.1, size=(9, 3)))
    assert normalized_l2_percent(g, g) == 0.0
    lo = g.vertices.min(axis=0)
    scaled = g.with_vertices(lo + 1.01 * (g.vertices - lo))
    assert abs(normalized_l2_percent(scaled, g) - 1.0) < 1e-9
    # box (0,0,0)-(2,4,1): gt -> (0,0,0),(1,1,1); pred -> (0,0,0),(1,1,2); 100 * 1 / sqrt(3)
    gt = TriMesh([[0, 0, 0], [2, 4, 1]], np.zeros((0, 3)))
    pred = gt.with_vertices([[0, 0, 0], [2, 4, 2]])
    assert abs(normalized_l2_percent(pred, gt) - 100 / np.sqrt(3)) < 1e-12
    zero = TriMesh(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(MetricError):
        normalized_l2_percent(zero, zero)


def test_precision_curve_examples():
    assert precision_curve([0, 0, 0], [0.1, 1.0]) == [1.0, 1.0]
    assert precision_curve([1, 2, 3], [2.5]) == [2 / 3]
    assert precision_curve([1, 2, 3], [0.5]) == [0.0]
    assert precision_curve([1, 2, 3], [np.inf]) == [1.0]
    with pytest.raises(MetricError):
        precision_curve([1], [2, 1])


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.lists(st.floats(0, 12), min_size=1, max_size=10))
def test_precision_curve_monotone_in_unit_interval(errors, thresholds):
    curve = precision_curve(errors, sorted(thresholds))
    assert all(0 <= f <= 1 for f in curve)
    assert all(b >= a for a, b in zip(curve, curve[1:]))


@given(st.integers(0, 2**31))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    g = grid_mesh(4, 4, 0.1, 0.1)
    gt = g.with_vertices(g.vertices + rng.normal(scale=0.03, size=(16, 3)))
    pred = gt.with_vertices(gt.vertices + rng.normal(scale=0.03, size=(16, 3)))
    assert e_dist(pred, gt) <= np.sqrt(float(vertex_loss(pred.vertices, gt.vertices).data)) + 1e-15
    assert abs(e_norm(pred, gt) - e_norm(gt, pred)) < 1e-9
    R = Rotation.random(random_state=seed % 2**32).as_matrix()
    rot = lambda m: m.with_vertices(m.vertices @ R.T)
    assert abs(e_norm(rot(pred), rot(gt)) - e_norm(pred, gt)) < 1e-6
    rep = evaluate_pair(pred, gt)
    assert rep.e_dist >= 0 and 0 <= rep.e_norm <= 180
    fr = [f for _, f in rep.precision_curve]
    assert all(b >= a for a, b in zip(fr, fr[1:]))


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [(0.0, 0.0), (0.5, 0.25)])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["threshold,fraction", "0,0.000000", "0.5,0.250000"]
