import math

import numpy as np
import pytest

from rewirelab.optim import (
    SGD,
    Adam,
    ConstantSchedule,
    CosineSchedule,
    OptimizerKind,
    clip_grad_norm,
    global_grad_norm,
    make_optimizer,
)
from rewirelab.tensor import Tensor


def _param(data: list[float], grad: list[float]) -> Tensor:
    param = Tensor(data, requires_grad=True)
    param.grad = np.array(grad)
    return param


def test_sgd_step() -> None:
    """Test a plain and a weight-decayed SGD step."""
    param = _param([1.0, 2.0], [0.5, -1.0])
    SGD([param], lr=0.1).step()
    np.testing.assert_allclose(param.data, [0.95, 2.1])

    param = _param([1.0, 2.0], [0.0, 0.0])
    SGD([param], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(param.data, [0.95, 1.9])


def test_adam_first_step() -> None:
    """The first bias-corrected Adam step moves each entry by about lr."""
    param = _param([1.0, -1.0, 0.0], [3.0, -0.2, 0.0])
    Adam([param], lr=0.01).step()
    np.testing.assert_allclose(param.data, [0.99, -0.99, 0.0], atol=1e-6)


def test_step_rebinds_data() -> None:
    """Updates leave arrays captured before the step untouched."""
    param = _param([1.0], [1.0])
    before = param.data
    make_optimizer(OptimizerKind.ADAM, [param], lr=0.1).step()

    assert before[0] == 1.0
    assert param.data is not before


def test_params_without_grad_are_skipped() -> None:
    """Test that parameters without a gradient are left alone."""
    param = Tensor([1.0, 2.0], requires_grad=True)
    for kind in OptimizerKind:
        make_optimizer(kind, [param], lr=1.0, weight_decay=0.1).step()
    np.testing.assert_array_equal(param.data, [1.0, 2.0])


def test_invalid_settings() -> None:
    """Test negative learning rates and weight decay."""
    with pytest.raises(ValueError):
        SGD([], lr=-1.0)
    with pytest.raises(ValueError):
        Adam([], lr=1.0, weight_decay=-0.1)


def test_clip_grad_norm() -> None:
    """Clipping returns the pre-clip norm and rescales the gradients."""
    a = _param([0.0], [3.0])
    b = _param([0.0, 0.0], [0.0, 4.0])

    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert global_grad_norm([a, b]) == pytest.approx(1.0)
    np.testing.assert_allclose(b.grad, [0.0, 0.8])

    assert clip_grad_norm([a, b], None) == pytest.approx(1.0)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [0.6])


def test_cosine_schedule() -> None:
    """Test the endpoints, midpoint and clamp of cosine annealing."""
    schedule = CosineSchedule(base_lr=1e-3, t_max=10, lr_min=1e-6)

    assert schedule(0) == pytest.approx(1e-3)
    assert schedule(5) == pytest.approx((1e-3 + 1e-6) / 2)
    assert schedule(10) == pytest.approx(1e-6)
    assert schedule(25) == pytest.approx(1e-6)
    expected = 1e-6 + (1e-3 - 1e-6) * (1 + math.cos(math.pi * 3 / 10)) / 2
    assert schedule(3) == pytest.approx(expected)

    assert ConstantSchedule(0.1)(99) == 0.1
