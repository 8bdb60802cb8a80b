import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbdseg import ops
from rgbdseg.gradcheck import check, weighted_sum
from rgbdseg.tensor import (
    DimensionError,
    GraphError,
    NonFiniteError,
    Tensor,
    backward,
    concat,
    load_tensor,
    matmul,
    no_grad,
    reshape,
    save_tensor,
    split,
    swapaxes,
    transpose,
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(2, 5))
    out = matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_sum():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    rep = check(lambda: weighted_sum(matmul(a, b), w), [a, b])
    assert rep.max_rel_error < 1e-6


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(4)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    assert check(lambda: weighted_sum(a @ b, w), [a, b]).max_rel_error < 1e-6


# -- softmax / sigmoid ---------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_two_logits():
    # 1 / (1 + e) and e / (1 + e)
    expected = [1 / (1 + np.e), np.e / (1 + np.e)]
    np.testing.assert_allclose(ops.softmax(Tensor([1.0, 2.0])).data, expected, atol=1e-12)
    np.testing.assert_allclose(ops.softmax(Tensor([1.0, 2.0])).data, [0.26894, 0.73106], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    a = ops.softmax(Tensor(x), axis=-1).data
    b = ops.softmax(Tensor(x + c), axis=-1).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    assert (a >= 0).all()


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        ops.softmax(Tensor(np.ones((2, 2))), axis=2)


def test_sigmoid_values():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    assert abs(ops.sigmoid(Tensor(2.0)).item() - 0.880797) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-700, 700)))
def test_sigmoid_symmetry(x):
    s = ops.sigmoid(Tensor(x)).data + ops.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, rtol=0, atol=1e-12)


# -- backward contract -----------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_backward_rejects_detached():
    with pytest.raises(GraphError):
        backward(Tensor(1.0) * 3.0)


def test_backward_rejects_replay():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert y.is_leaf and not y.requires_grad


def test_grad_accumulates_over_shared_use():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0 + x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)


def test_nonfinite_rejected_at_construction():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_rejected_at_op_boundary():
    with pytest.raises(NonFiniteError):
        Tensor([1e308]) * 10.0


# -- broadcasting ----------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (4,), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (1, 4), elements=st.floats(-1e3, 1e3)),
)
def test_broadcast_add_commutative_associative(a, b, c):
    A, B, C = Tensor(a), Tensor(b), Tensor(c)
    np.testing.assert_array_equal((A + B).data, (B + A).data)
    np.testing.assert_allclose(((A + B) + C).data, (A + (B + C)).data, rtol=1e-12, atol=1e-12)


def test_broadcast_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_broadcast_grad_reduces():
    rng = np.random.default_rng(5)
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    w = rng.normal(size=(3, 4))
    assert check(lambda: weighted_sum(a * b + b, w), [a, b]).max_rel_error < 1e-6


# -- shape ops -------------------------------------------------------------------


def test_reshape_transpose_concat_split_roundtrip():
    rng = np.random.default_rng(6)
    x = leaf(rng, 2, 3, 4)
    parts = split(transpose(x, (2, 0, 1)), 2, axis=0)
    back = transpose(concat(parts, axis=0), (1, 2, 0))
    np.testing.assert_array_equal(back.data, x.data)
    w = rng.normal(size=(2, 3, 4))
    assert check(lambda: weighted_sum(reshape(swapaxes(x, 0, 2), (4, 6)), w.reshape(4, 6)), [x]).max_rel_error < 1e-6


def test_reshape_bad_shape():
    with pytest.raises(DimensionError):
        reshape(Tensor(np.ones(6)), (4, 2))


# -- determinism -------------------------------------------------------------------


def test_forward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        a, b = leaf(rng, 8, 16), leaf(rng, 16, 8)
        return ops.layer_norm(ops.gelu(a @ b), Tensor(np.ones(8)), Tensor(np.zeros(8))).data

    assert run().tobytes() == run().tobytes()


# -- serialization -------------------------------------------------------------------


def test_tensor_file_layout(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    save_tensor(tmp_path / "t.tnsr", Tensor(arr))
    raw = (tmp_path / "t.tnsr").read_bytes()
    assert raw[:4] == b"TNSR"
    assert struct.unpack("<III", raw[4:16]) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f8"), arr.ravel())
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.tnsr").data, arr)


def test_tensor_file_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad")
    save_tensor(tmp_path / "t", np.ones(3))
    (tmp_path / "short").write_bytes((tmp_path / "t").read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "short")


def test_scalar_tensor_roundtrip(tmp_path):
    save_tensor(tmp_path / "s", Tensor(3.5))
    assert load_tensor(tmp_path / "s").item() == 3.5
