"""
Tests for the tape-based autodiff core.
"""

import numpy as np
import pytest

from rasnet.config import settings
from rasnet.errors import ContractError, DimensionError, NonFiniteError
from rasnet.tensor import GradTape, Tensor, active_tape, backward, get_default_dtype, precision


def test_default_dtype_and_precision_context():
    """Test float32 default and the float64 verification context."""
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with precision(np.float64):
        assert get_default_dtype() == np.float64
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_broadcast_add_mul_gradients():
    """Test gradients of broadcast add and mul are summed back to input shapes."""
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
    b = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        loss = (a * b + b).sum()
        backward(loss, tape)

    np.testing.assert_array_equal(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    # d/db sum(a*b + b) = column sums of a + number of rows
    np.testing.assert_array_equal(b.grad, a.data.sum(axis=0) + 2)


def test_tape_records_in_execution_order():
    """Test op names are recorded in the order they ran."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = (x * x).mean()
    assert tape.op_names() == ["mul", "mean"]
    assert not y.is_leaf


def test_no_recording_outside_tape():
    """Test operations outside a tape are not tracked."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    assert active_tape() is None
    assert not y.requires_grad
    with pytest.raises(ContractError):
        backward(y.sum())


def test_backward_requires_scalar_loss():
    """Test backward rejects a non-scalar output."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * 3.0
        with pytest.raises(ContractError):
            backward(y, tape)


def test_gradients_accumulate_until_reset():
    """Test two backward passes sum into leaf.grad and zero_grad resets it."""
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    for _ in range(2):
        with GradTape() as tape:
            backward((x * x).sum(), tape)
    assert x.grad[0] == pytest.approx(8.0)
    x.zero_grad()
    assert x.grad is None


def test_shared_leaf_used_twice():
    """Test a leaf used by two ops receives both contributions."""
    w = Tensor([3.0], requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        backward((w * 2.0 + w * 5.0).sum(), tape)
    assert w.grad[0] == pytest.approx(7.0)


def test_reshape_and_mean_backward():
    """Test structural ops route gradients back unchanged in shape."""
    x = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        backward(x.reshape(3, 2).mean(), tape)
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))
    with pytest.raises(DimensionError):
        x.reshape(4, 2)


def test_incompatible_shapes_raise():
    """Test non-broadcastable shapes raise a dimension error."""
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_non_finite_forward_raises(monkeypatch):
    """Test forward overflow is reported with the op name, and can be disabled."""
    big = Tensor([3e38], dtype=np.float32)
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError) as excinfo:
            big * big
        assert excinfo.value.op_name == "mul"

        monkeypatch.setattr(settings, "check_finite", False)
        assert np.isinf((big * big).data[0])


def test_item_and_detach():
    """Test item() on a single element and detach() copying data."""
    x = Tensor([[4.0]], requires_grad=True)
    assert x.item() == 4.0
    y = x.detach()
    y.data[0, 0] = 1.0
    assert x.item() == 4.0 and not y.requires_grad
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()
