import math
from typing import Callable, Sequence

import numpy as np
import pytest

from rewirelab.tensor import (
    Tape,
    Tensor,
    absolute,
    add,
    concatenate,
    conv1d,
    cross_entropy_with_logits,
    detach,
    dropout,
    gelu,
    jacobian_norm,
    jacobian_rows,
    matmul,
    multiply,
    numerical_gradient,
    power,
    relu,
    reduce_mean,
    reduce_sum,
    reshape,
    row_normalize,
    row_softmax,
    scale,
    sigmoid,
    squared_error,
    sub,
    take,
    transpose,
)

TRIALS = 20


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale_)


def _check_gradients(
    build: Callable[..., Tensor],
    shapes: Sequence[tuple[int, ...]],
    positive: bool = False,
) -> None:
    for trial in range(TRIALS):
        rng = np.random.default_rng(trial)
        inputs = [
            Tensor(
                rng.uniform(0.5, 2.0, shape)
                if positive
                else rng.normal(size=shape),
                requires_grad=True,
            )
            for shape in shapes
        ]
        weights = rng.normal(size=build(*inputs).shape)

        def fn() -> Tensor:
            return reduce_sum(multiply(build(*inputs), weights))

        with Tape() as tape:
            loss = fn()
        tape.backward(loss)

        for tensor in inputs:
            numeric = numerical_gradient(fn, tensor)
            assert tensor.grad is not None
            assert _relative_error(tensor.grad, numeric) < 1e-5


def test_matmul_gradient() -> None:
    """Test matmul against finite differences."""
    _check_gradients(matmul, [(3, 4), (4, 2)])


def test_elementwise_gradients() -> None:
    """Test add, sub and multiply, including row and column vectors."""
    _check_gradients(add, [(3, 4), (3, 4)])
    _check_gradients(add, [(3, 4), (1, 4)])
    _check_gradients(sub, [(3, 4), (3, 1)])
    _check_gradients(multiply, [(3, 4), (1, 4)])
    _check_gradients(lambda x: scale(x, -2.5), [(3, 4)])


def test_power_gradient() -> None:
    """Test power with fractional and negative exponents."""
    _check_gradients(lambda x: power(x, 1.5), [(3, 4)], positive=True)
    _check_gradients(lambda x: power(x, -1.0), [(3, 4)], positive=True)


def test_activation_gradients() -> None:
    """Test relu, gelu, sigmoid and absolute value."""
    for op in (relu, gelu, sigmoid, absolute):
        _check_gradients(op, [(4, 5)])


def test_row_softmax_gradient() -> None:
    """Test plain and masked row softmax."""
    _check_gradients(row_softmax, [(4, 5)])

    mask = np.random.default_rng(0).random((5, 5)) < 0.5
    np.fill_diagonal(mask, True)
    _check_gradients(lambda x: row_softmax(x, mask), [(5, 5)])


def test_row_normalize_gradient() -> None:
    """Test row normalization on positive entries."""
    _check_gradients(row_normalize, [(4, 3)], positive=True)


def test_shape_gradients() -> None:
    """Test transpose, reshape, concatenate and indexing."""
    _check_gradients(transpose, [(3, 4)])
    _check_gradients(lambda x: transpose(x, (1, 0, 2)), [(2, 3, 4)])
    _check_gradients(lambda x: reshape(x, (6, 2)), [(3, 4)])
    _check_gradients(
        lambda a, b: concatenate([a, b], axis=1), [(3, 2), (3, 4)]
    )
    _check_gradients(lambda x: take(x, slice(1, 3)), [(4, 3)])


def test_reduction_gradients() -> None:
    """Test sums and means over all entries and along an axis."""
    _check_gradients(reduce_sum, [(3, 4)])
    _check_gradients(lambda x: reduce_sum(x, axis=1), [(3, 4)])
    _check_gradients(lambda x: reduce_mean(x, axis=0), [(3, 4)])
    _check_gradients(
        lambda x: reduce_mean(x, axis=1, keepdims=True), [(3, 4)]
    )


def test_loss_gradients() -> None:
    """Test squared error and masked cross-entropy."""
    _check_gradients(squared_error, [(3, 4), (3, 4)])

    labels = np.array([0, 2, 1, 2, 0])
    mask = np.array([True, True, False, True, True])
    _check_gradients(
        lambda x: cross_entropy_with_logits(x, labels, mask), [(5, 3)]
    )


def test_dropout_and_conv_gradients() -> None:
    """Test seeded dropout and the dilated temporal convolution."""
    _check_gradients(lambda x: dropout(x, 0.3, seed=7), [(4, 5)])
    _check_gradients(
        lambda x, w: conv1d(x, w, dilation=2), [(2, 9, 3), (3, 3, 2)]
    )


def test_forward_values() -> None:
    """Test identity, symmetry and analytic forward values."""
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(matmul(np.eye(3), a).data, a)

    np.testing.assert_allclose(row_softmax(np.ones((1, 4))).data, 0.25)

    for k in (2, 3, 7):
        loss = cross_entropy_with_logits(np.zeros((4, k)), np.zeros(4))
        assert loss.item() == pytest.approx(math.log(k))


def test_masked_softmax_support() -> None:
    """Entries outside the mask are exactly zero."""
    mask = np.array([[True, False, True], [False, False, False]])
    out = row_softmax(np.ones((2, 3)), mask).data

    np.testing.assert_array_equal(out[0], [0.5, 0.0, 0.5])
    np.testing.assert_array_equal(out[1], 0.0)


def test_backward_examples() -> None:
    """Test the gradient of sum(x) and of half the squared norm."""
    x = Tensor(np.arange(5.0), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(5))

    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = scale(reduce_sum(multiply(x, x)), 0.5)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, -2.0])


def test_broadcast_scalar_gradient() -> None:
    """A (1, 1) operand gets the summed gradient back in its own shape."""
    a = Tensor([[2.0]], requires_grad=True)
    b = Tensor([[1.0, -1.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(multiply(add(a, b), [[1.0, 2.0, 3.0]]))
    tape.backward(loss)

    assert a.grad.shape == (1, 1)
    np.testing.assert_array_equal(a.grad, [[6.0]])
    np.testing.assert_array_equal(b.grad, [[1.0, 2.0, 3.0]])
    _check_gradients(add, [(1, 1), (1, 4)])
    _check_gradients(multiply, [(3, 1), (1, 1)])


def test_mlp_gradient() -> None:
    """Test a two-layer MLP end to end against finite differences."""
    rng = np.random.default_rng(3)
    inputs = rng.normal(size=(6, 4))
    w1 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    b1 = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 1)), requires_grad=True)
    target = rng.normal(size=(6, 1))

    def fn() -> Tensor:
        hidden = gelu(add(matmul(inputs, w1), b1))
        return reduce_mean(squared_error(matmul(hidden, w2), target))

    with Tape() as tape:
        loss = fn()
    tape.backward(loss)

    for tensor in (w1, b1, w2):
        numeric = numerical_gradient(fn, tensor)
        assert _relative_error(tensor.grad, numeric) < 1e-5


def test_shape_errors() -> None:
    """Shape mismatches name the op and both shapes."""
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError, match="add"):
        add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ValueError, match="conv1d"):
        conv1d(np.ones((1, 5, 2)), np.ones((3, 3, 1)))
    with pytest.raises(ValueError, match="reshape"):
        reshape(np.ones((2, 3)), (4, 2))


def test_backward_errors() -> None:
    """Test non-scalar losses and empty tapes."""
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)
    with pytest.raises(ValueError, match="empty"):
        Tape().backward(Tensor(1.0))


def test_replay_and_accumulation() -> None:
    """Gradients accumulate across calls and replay after zeroing."""
    x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(gelu(multiply(x, x)))

    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)

    x.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_detach_stops_gradient() -> None:
    """No gradient flows through a detached copy."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(multiply(detach(x), y))
    tape.backward(loss)

    assert x.grad is None
    np.testing.assert_array_equal(y.grad, [1.0, 2.0])


def test_dropout_determinism() -> None:
    """Dropout is reproducible by seed and disabled in evaluation."""
    x = np.ones((10, 10))
    a = dropout(x, 0.5, seed=1).data
    b = dropout(x, 0.5, seed=1).data

    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, dropout(x, 0.5, seed=2).data)
    np.testing.assert_array_equal(dropout(x, 0.5, 1, training=False).data, x)
    with pytest.raises(ValueError):
        dropout(x, 1.0, seed=1)


def test_jacobian_linear_closed_form() -> None:
    """Norms of y = ÂXW equal |Â_vu|·‖W‖₂."""
    rng = np.random.default_rng(0)
    adjacency = rng.uniform(size=(6, 6)) * (rng.random((6, 6)) < 0.5)
    weight = rng.normal(size=(3, 2))
    inputs = rng.normal(size=(6, 3))

    def model(x: Tensor) -> Tensor:
        return matmul(matmul(adjacency, x), weight)

    spectral = np.linalg.norm(weight, ord=2)
    for target in range(6):
        norms = jacobian_rows(model, inputs, target)
        np.testing.assert_allclose(
            norms, np.abs(adjacency[target]) * spectral, atol=1e-8
        )

    single = jacobian_norm(model, inputs, 1, 4, output_step=0)
    expected = abs(adjacency[4, 1]) * np.linalg.norm(weight[:, 0])
    assert single == pytest.approx(expected, abs=1e-8)


def test_jacobian_receptive_field() -> None:
    """Two propagation steps on a path reach exactly two hops."""
    path = np.zeros((6, 6))
    for i in range(5):
        path[i, i + 1] = path[i + 1, i] = 1.0
    propagate = path + np.eye(6)

    def model(x: Tensor) -> Tensor:
        return matmul(propagate, matmul(propagate, x))

    norms = jacobian_rows(model, np.ones((6, 2)), target_node=0)
    assert np.all(norms[:3] > 0)
    np.testing.assert_array_equal(norms[3:], 0.0)


def test_jacobian_identity() -> None:
    """The identity model has a unit self-block and nothing else."""
    norms = jacobian_rows(lambda x: x, np.ones((4, 3)), target_node=2)
    np.testing.assert_allclose(norms, [0.0, 0.0, 1.0, 0.0])


def test_jacobian_index_errors() -> None:
    """Out-of-range nodes and steps are rejected."""
    inputs = np.ones((4, 2))
    with pytest.raises(ValueError, match="target"):
        jacobian_rows(lambda x: x, inputs, target_node=4)
    with pytest.raises(ValueError, match="source"):
        jacobian_norm(lambda x: x, inputs, source_node=-1, target_node=0)
    with pytest.raises(ValueError, match="output step"):
        jacobian_rows(lambda x: x, inputs, 0, output_step=5)
