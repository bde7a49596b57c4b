import numpy as np
import pytest
from hypothesis import given, strategies as st

from drapenet import tensor as T
from drapenet.gradcheck import grad_check, max_error, relative_error
from drapenet.gradsuite import CASES, run_suite
from drapenet.optim import ParamStore, adam_step
from drapenet.tensor import ShapeError, Tensor, backward


def test_leaky_relu_slope():
    assert T.leaky_relu(Tensor([-1.0, 2.0]), 0.1).data.tolist() == [-0.1, 2.0]


def test_row_max_pool_ties_to_row_zero():
    x = Tensor(np.tile([[1.0, 2.0, 3.0]], (4, 1)), requires_grad=True)
    out = T.row_max_pool(x)
    assert out.data.tolist() == [[1.0, 2.0, 3.0]]
    backward(T.reduce_sum(out))
    assert x.grad[0].tolist() == [1.0, 1.0, 1.0]
    assert not x.grad[1:].any()


@given(st.integers(0, 2**31))
def test_row_max_pool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    assert np.array_equal(T.row_max_pool(Tensor(x)).data, T.row_max_pool(Tensor(x[perm])).data)


def test_linear_identity():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.reduce_sum(T.square(x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_constant_graph_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.reduce_sum(x * 0.0 + 3.0))
    assert x.grad.tolist() == [0.0, 0.0]


def test_composite_linear_leaky_sum(rng):
    x, W, b = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4))
    rows = grad_check(lambda: T.reduce_sum(T.leaky_relu(T.linear(x, W, b))), {"x": x, "W": W, "b": b})
    assert max_error(rows) < 1e-4


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="concat"):
        T.concat_cols([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-9)) < 1e-2


def test_every_primitive_passes_gradcheck():
    rows = run_suite(instances=10, seed=3)
    assert {r.name for r in rows} == set(CASES)
    bad = [(r.name, r.max_rel_error) for r in rows if not r.passed(1e-4)]
    assert not bad


def test_check_finite_hook():
    assert T.CHECK_FINITE
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.sqrt(Tensor([-1.0]))


# -- Adam

def test_adam_first_step_is_lr_sign(rng):
    p = Tensor(rng.normal(size=(3, 2)))
    start = p.data.copy()
    store = ParamStore({"p": p})
    g = rng.normal(size=(3, 2))
    adam_step(store, {"p": g}, lr=1e-3)
    assert np.allclose(p.data - start, -1e-3 * np.sign(g), atol=1e-8)


def test_adam_zero_gradient():
    p = Tensor([1.0, -2.0])
    store = ParamStore({"p": p})
    adam_step(store, {"p": np.zeros(2)})
    assert p.data.tolist() == [1.0, -2.0] and store.step == 1


def test_adam_two_steps_closed_form():
    p = Tensor([0.5])
    store = ParamStore({"p": p})
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    for _ in range(2):
        adam_step(store, {"p": np.ones(1)}, lr, b1, b2, eps)
    # with g = 1 every step, m_hat = v_hat = 1, so each update is lr / (1 + eps)
    assert p.data[0] == pytest.approx(0.5 - 2 * lr / (1 + eps), abs=1e-15)


def test_adam_lr_zero_bit_identical(rng):
    p = Tensor(rng.normal(size=(4, 4)))
    before = p.data.copy()
    store = ParamStore({"p": p})
    for _ in range(5):
        adam_step(store, {"p": rng.normal(size=(4, 4))}, lr=0.0)
    assert np.array_equal(p.data, before)


def test_adam_shape_mismatch():
    store = ParamStore({"p": Tensor(np.zeros(3))})
    with pytest.raises(ShapeError):
        adam_step(store, {"p": np.zeros(4)})
