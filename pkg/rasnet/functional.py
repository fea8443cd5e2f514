"""
Differentiable layer primitives: convolution, batch normalization, pooling,
fully-connected maps, activations, scale-shift, channel convolution and the
classification loss.
"""

from typing import TYPE_CHECKING, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DegenerateBatchError, DimensionError
from .tensor import Tensor, record_op

if TYPE_CHECKING:
    from .modules import BatchNormState

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


# Convolution

def _windows(x_padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> strided view [N,C,H',W',kh,kw]."""
    windows = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    if kh == 1 and kw == 1 and padding == 0:
        strided = x[:, :, ::stride, ::stride]
        out = np.tensordot(w[:, :, 0, 0], strided, axes=([1], [1]))  # O,N,H',W'
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    windows = _windows(_pad(x, padding), kh, kw, stride)
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Gradients of conv2d w.r.t. input and weight."""
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = grad.shape[2:]
    x_padded = _pad(x, padding)

    windows = _windows(x_padded, kh, kw, stride)
    grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw

    grad_padded = np.zeros_like(x_padded)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))  # N,H',W',C
            grad_padded[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    grad_x = grad_padded[:, :, padding:padding + h, padding:padding + wd] if padding else grad_padded
    return np.ascontiguousarray(grad_x), grad_w.astype(w.dtype, copy=False)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding; no bias, dilation or groups."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kh, kw = weight.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} must have odd sides")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(f"conv2d: input {x.shape[2:]} smaller than kernel {kh}x{kw}")

    x_data, w_data = x.data, weight.data

    def backward_fn(grad):
        return _conv2d_backward(grad, x_data, w_data, stride, padding)

    return record_op("conv2d", (x, weight), _conv2d_forward(x_data, w_data, stride, padding), backward_fn)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# Normalization

def batch_norm(x: Tensor, state: "BatchNormState", axis: int = 1) -> Tensor:
    """
    Batch normalization over every axis except ``axis``.

    Train mode normalizes with batch statistics and updates the running
    averages in ``state``; eval mode is a fixed per-channel affine map.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm expects at least 2-D input, got {x.shape}")
    channels = x.shape[axis]
    if channels != state.num_features:
        raise DimensionError(f"batch_norm: input has {channels} channels, state has {state.num_features}")

    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = channels
    gamma, beta = state.gamma, state.beta
    training = state.training

    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError("train-mode batch_norm needs a batch of at least 2")
        count = x.size // channels
        mean = x.data.mean(axis=reduce_axes)
        var = x.data.var(axis=reduce_axes)
        state.update_running(mean, var * (count / (count - 1)))
    else:
        count = x.size // channels
        mean = state.running_mean.astype(x.dtype, copy=False)
        var = state.running_var.astype(x.dtype, copy=False)

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype, copy=False).reshape(bshape)
    x_hat = (x.data - mean.reshape(bshape)) * inv_std
    gamma_data = gamma.data.reshape(bshape)
    out = x_hat * gamma_data + beta.data.reshape(bshape)

    def backward_fn(grad):
        grad_gamma = (grad * x_hat).sum(axis=reduce_axes)
        grad_beta = grad.sum(axis=reduce_axes)
        grad_xhat = grad * gamma_data
        if training:
            grad_x = inv_std / count * (
                count * grad_xhat
                - grad_xhat.sum(axis=reduce_axes, keepdims=True)
                - x_hat * (grad_xhat * x_hat).sum(axis=reduce_axes, keepdims=True)
            )
        else:
            grad_x = grad_xhat * inv_std
        return grad_x, grad_gamma.astype(gamma.dtype, copy=False), grad_beta.astype(beta.dtype, copy=False)

    return record_op("batch_norm", (x, gamma, beta), out, backward_fn)


# Pooling and dense maps

def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError(f"global_avg_pool: empty plane {h}x{w}")
    shape = x.shape

    def backward_fn(grad):
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), shape).copy(),)

    return record_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), backward_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ weight.T + bias, weight is [Dout, Din]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")

    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(grad):
        grads = [grad @ w_data, grad.T @ x_data]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("fully_connected", inputs, out, backward_fn)


# Activations

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep strictly inside (0, 1) even where the float format saturates
    return np.clip(s, np.finfo(x.dtype).tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu | sigmoid | tanh | identity."""
    if kind == "relu":
        mask = x.data > 0
        return record_op("relu", (x,), x.data * mask, lambda grad: (grad * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return record_op("sigmoid", (x,), s, lambda grad: (grad * s * (1 - s),))
    if kind == "tanh":
        t = np.tanh(x.data)
        return record_op("tanh", (x,), t, lambda grad: (grad * (1 - t * t),))
    if kind == "identity":
        return record_op("identity", (x,), x.data.copy(), lambda grad: (grad,))
    raise ConfigurationError(f"unknown activation '{kind}' (expected one of {', '.join(ACTIVATIONS)})")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# Attention building blocks

def scale_shift(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel x * gamma + beta on [N,C]."""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"scale_shift: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    x_data, g_data = x.data, gamma.data

    def backward_fn(grad):
        return grad * g_data, (grad * x_data).sum(axis=0), grad.sum(axis=0)

    return record_op("scale_shift", (x, gamma, beta), x_data * g_data + beta.data, backward_fn)


def channel_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """1-D zero-padded convolution across the channel axis of [N,C]."""
    if x.ndim != 2 or kernel.ndim != 1:
        raise DimensionError(f"channel_conv1d expects [N,C] and [k], got {x.shape} and {kernel.shape}")
    size = kernel.shape[0]
    if size % 2 == 0:
        raise ConfigurationError(f"channel kernel size must be odd, got {size}")
    pad = (size - 1) // 2
    channels = x.shape[1]
    padded = np.pad(x.data, ((0, 0), (pad, pad)))
    windows = sliding_window_view(padded, size, axis=1)  # N,C,k
    k_data = kernel.data

    def backward_fn(grad):
        grad_k = np.tensordot(grad, windows, axes=([0, 1], [0, 1]))
        grad_padded = np.zeros_like(padded)
        for j in range(size):
            grad_padded[:, j:j + channels] += grad * k_data[j]
        return grad_padded[:, pad:pad + channels], grad_k.astype(kernel.dtype, copy=False)

    return record_op("channel_conv1d", (x, kernel), windows @ k_data, backward_fn)


# Loss

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DimensionError(f"cross_entropy: labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def backward_fn(grad):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (grad / n),)

    return record_op("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward_fn)
