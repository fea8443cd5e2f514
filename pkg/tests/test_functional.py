"""
Tests for layer primitives: values, error cases and batch-norm state handling.
"""

import numpy as np
import pytest

from rasnet import functional as F
from rasnet.errors import ConfigurationError, DegenerateBatchError, DimensionError
from rasnet.modules import BatchNormState, Conv2d, Linear
from rasnet.tensor import Tensor, precision


def naive_conv2d(x, w, stride, padding):
    """Direct loop cross-correlation used as an oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def test_conv2d_ones_kernel():
    """Test a 3x3 ones kernel with padding counts neighbours."""
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9
    assert out.data[0, 0, 0, 0] == 4


@pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)])
def test_conv2d_matches_naive(kernel, stride, padding):
    """Test conv2d against the loop oracle."""
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, kernel, kernel))
        out = F.conv2d(Tensor(x), Tensor(w), stride, padding)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_errors():
    """Test channel mismatch, even kernels and oversize kernels are rejected."""
    x = Tensor(np.ones((1, 3, 4, 4)))
    with pytest.raises(DimensionError):
        F.conv2d(x, Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        F.conv2d(x, Tensor(np.ones((2, 3, 2, 2))))
    with pytest.raises(DimensionError):
        F.conv2d(x, Tensor(np.ones((2, 3, 5, 5))))


def test_conv_module_output_size_and_init():
    """Test Conv2d geometry and fan-out initialization scale."""
    conv = Conv2d(16, 64, 3, stride=2, padding=1, rng=np.random.default_rng(1))
    assert conv.output_size(32) == 16
    assert conv.weight.shape == (64, 16, 3, 3)
    assert conv.weight.data.std() == pytest.approx(np.sqrt(2.0 / (9 * 64)), rel=0.1)


def test_batch_norm_train_normalizes_and_updates_running():
    """Test train mode gives zero-mean unit-variance output and updates running stats."""
    rng = np.random.default_rng(3)
    with precision(np.float64):
        state = BatchNormState(3)
        x = Tensor(rng.standard_normal((8, 3, 4, 4)) * 2.0 + 1.0)
        out = F.batch_norm(x, state)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)

    count = 8 * 4 * 4
    batch_mean = x.data.mean(axis=(0, 2, 3))
    batch_var = x.data.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(state.running_mean, 0.1 * batch_mean)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * batch_var)


def test_batch_norm_eval_uses_running_stats():
    """Test eval mode is a fixed affine map from running statistics."""
    with precision(np.float64):
        state = BatchNormState(2)
        state.mode = "eval"
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 1.0])
        x = Tensor(np.array([[3.0, 0.0]]))
        out = F.batch_norm(x, state)
    np.testing.assert_allclose(out.data, [[2.0 / np.sqrt(4.0 + 1e-5), 1.0 / np.sqrt(1.0 + 1e-5)]])


def test_batch_norm_degenerate_batch():
    """Test train mode refuses a single example but eval mode accepts it."""
    state = BatchNormState(3)
    x = Tensor(np.ones((1, 3, 2, 2)))
    with pytest.raises(DegenerateBatchError):
        F.batch_norm(x, state)
    state.mode = "eval"
    assert F.batch_norm(x, state).shape == (1, 3, 2, 2)


def test_batch_norm_state_validation():
    """Test bad momentum, epsilon and mode values are configuration errors."""
    with pytest.raises(ConfigurationError):
        BatchNormState(4, momentum=1.5)
    with pytest.raises(ConfigurationError):
        BatchNormState(4, eps=0.0)
    with pytest.raises(ConfigurationError):
        BatchNormState(4).mode = "inference"


def test_global_avg_pool_and_fully_connected():
    """Test pooling averages planes and FC computes x @ W.T + b."""
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_allclose(F.global_avg_pool(x).data, [[1.5, 5.5]])

    fc = Linear(2, 3, rng=np.random.default_rng(0))
    fc.bias.data = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    inp = Tensor([[1.0, -1.0]])
    np.testing.assert_allclose(fc(inp).data, inp.data @ fc.weight.data.T + fc.bias.data, rtol=1e-6)
    with pytest.raises(DimensionError):
        F.fully_connected(Tensor(np.ones((1, 3))), fc.weight)


def test_activations():
    """Test activation values, the open-interval sigmoid and unknown kinds."""
    x = Tensor([-2.0, 0.0, 2.0])
    np.testing.assert_allclose(F.activation(x, "relu").data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(F.activation(x, "tanh").data, np.tanh([-2.0, 0.0, 2.0]), rtol=1e-6)
    np.testing.assert_allclose(F.activation(x, "identity").data, x.data)
    s = F.sigmoid(Tensor([-200.0, 0.0, 200.0])).data
    assert s[1] == pytest.approx(0.5)
    assert 0.0 < s[0] and s[2] < 1.0
    with pytest.raises(ConfigurationError):
        F.activation(x, "gelu")


def test_scale_shift_and_channel_conv1d():
    """Test per-channel affine values and zero-padded channel convolution."""
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    out = F.scale_shift(x, Tensor([2.0, 2.0, 1.0, 0.0]), Tensor([0.0, 1.0, 0.0, 5.0]))
    np.testing.assert_allclose(out.data, [[2.0, 5.0, 3.0, 5.0]])

    np.testing.assert_allclose(F.channel_conv1d(x, Tensor([1.0, 1.0, 1.0])).data, [[3.0, 6.0, 9.0, 7.0]])
    np.testing.assert_allclose(F.channel_conv1d(x, Tensor([0.0, 1.0, 0.0])).data, x.data)
    with pytest.raises(ConfigurationError):
        F.channel_conv1d(x, Tensor([1.0, 1.0]))


def test_cross_entropy_uniform_logits():
    """Test zero logits give log(num_classes)."""
    loss = F.cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 5, 9]))
    assert loss.item() == pytest.approx(np.log(10), rel=1e-6)
    with pytest.raises(DimensionError):
        F.cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 1]))


@pytest.mark.parametrize("labels", [[0, 1, 2, 10], [-1, 0, 1, 2]])
def test_cross_entropy_rejects_out_of_range_labels(labels):
    """Test labels outside [0, classes) raise a dimension error."""
    with pytest.raises(DimensionError, match=r"\[0, 10\)"):
        F.cross_entropy(Tensor(np.zeros((4, 10))), np.array(labels))
