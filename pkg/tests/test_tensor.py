import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2idit import tensor as T
from i2idit.errors import ContractError, DimensionError
from i2idit.gradcheck import check_gradients, random_tensor
from i2idit.rng import Rng
from i2idit.tensor import Tape, Tensor, backward, no_grad

TOL = 1e-5


@pytest.fixture
def rng():
    return Rng(1234).split("tensor-tests")


def test_matmul_identity_and_projector():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    out = T.matmul(p, Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient(rng):
    a, b = random_tensor(rng.split("a"), (3, 4)), random_tensor(rng.split("b"), (4, 2))
    assert check_gradients(lambda: T.sum(T.matmul(a, b)), [a, b]) < 1e-6


def test_batched_matmul_gradient(rng):
    a, b = random_tensor(rng.split("a"), (2, 3, 4)), random_tensor(rng.split("b"), (4, 5))
    w = Tensor(rng.split("w").normal((2, 3, 5)))
    assert check_gradients(lambda: T.sum(T.matmul(a, b) * w), [a, b]) < TOL


def test_layer_norm_examples():
    np.testing.assert_array_equal(T.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]])).data, [[0, 0, 0, 0]])
    out = T.layer_norm(Tensor([[1.0, -1.0]]), eps=1e-14)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_empty_row_rejected():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 0))))


def test_layer_norm_gradient(rng):
    x = random_tensor(rng.split("x"), (2, 8))
    g, b = random_tensor(rng.split("g"), (8,)), random_tensor(rng.split("b"), (8,))
    w = Tensor(rng.split("w").normal((2, 8)))
    assert check_gradients(lambda: T.sum(T.layer_norm(x, g, b) * w), [x, g, b]) < TOL


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)


def test_softmax_gradient(rng):
    x = random_tensor(rng.split("x"), (6,))
    w = Tensor(rng.split("w").normal((6,)))
    assert check_gradients(lambda: T.sum(T.softmax(x) * w), [x]) < TOL


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = np.array(row)
    p = T.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(T.softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_small_examples():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert T.mean(Tensor([2.0, 4.0])).item() == 3.0


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


UNARY = {
    "neg": T.neg,
    "scale": lambda x: T.scale(x, -1.7),
    "square": T.square,
    "exp": T.exp,
    "sqrt": lambda x: T.sqrt(T.square(x) + 0.5),
    "tanh": T.tanh,
    "abs": T.abs,
    "clip": lambda x: T.clip(x, -0.6, 0.6),
    "gelu": T.gelu,
    "silu": T.silu,
    "sum_axis": lambda x: T.sum(x, axis=1, keepdims=True),
    "mean_axis": lambda x: T.mean(x, axis=0),
    "reshape": lambda x: T.reshape(x, (4, 3)),
    "transpose": lambda x: T.transpose(x, (1, 0)),
    "getitem": lambda x: x[1:, ::2],
    "split": lambda x: T.split(x, [1, 3], axis=1)[1] * 2.0,
    "concat": lambda x: T.concat([x, T.square(x)], axis=0),
    "gather_rows": lambda x: T.gather_rows(x, np.array([2, 0, 2])),
    "layer_norm": T.layer_norm,
    "softmax": T.softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    x = random_tensor(rng.split(name), (3, 4))
    if name in ("abs", "clip"):
        # keep probes away from kinks
        x.data[np.abs(np.abs(x.data) - 0.6) < 1e-3] += 0.01
        x.data[np.abs(x.data) < 1e-3] += 0.01
    fn = UNARY[name]
    w = Tensor(rng.split("w").normal(fn(x).shape))
    assert check_gradients(lambda: T.sum(fn(x) * w), [x]) < TOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcasting_binary_gradients(op, rng):
    a = random_tensor(rng.split("a"), (2, 3, 4))
    b = random_tensor(rng.split("b"), (3, 1))
    if op == "div":
        b.data = np.abs(b.data) + 0.5
    fn = getattr(T, op)
    w = Tensor(rng.split("w").normal((2, 3, 4)))
    assert check_gradients(lambda: T.sum(fn(a, b) * w), [a, b]) < TOL


def test_backward_examples():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(T.sum(y * y))
    np.testing.assert_array_equal(y.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_shared_leaf_sums_path_gradients(rng):
    x = random_tensor(rng, (5,))
    backward(T.sum(T.exp(x)))
    g1 = x.grad.copy()
    x.grad = None
    backward(T.sum(T.tanh(x)))
    g2 = x.grad.copy()
    x.grad = None
    backward(T.sum(T.exp(x)) + T.sum(T.tanh(x)))
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=1e-14)


def test_tape_replays_in_reverse_order():
    x = Tensor([0.3, -0.2], requires_grad=True)
    with Tape() as tape:
        y = T.tanh(x)
        z = T.exp(y)
        loss = T.sum(z * y)
        backward(loss)
    assert tape.ops == ["tanh", "exp", "mul", "sum"]
    assert tape.visited == tape.ops[::-1]
    assert tape.seqs == sorted(tape.seqs)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_results_stay_finite(rng):
    x = Tensor(rng.normal((4, 4)) * 30)
    for fn in (T.exp, T.softmax, T.layer_norm, T.gelu, T.silu, T.tanh):
        assert np.all(np.isfinite(fn(T.clip(x, -300, 300)).data))
