"""
Channel attention variants.

Each variant maps a channel descriptor X' = GAP(f(X)) of shape [N,C] to an
attention map V in (0,1)^{N x C}:

    se          V = sigmoid(W1 relu(W2 X'))
    se_deep     k independent (W1, W2) pairs applied in sequence
    se_shared   one (W1, W2) pair applied k times
    eca         V = sigmoid(conv1d_channels(X', kernel))
    eca_shared  one channel kernel applied k times
    ras         g(x) = x * gamma + beta applied k times with a connection
                (batch norm by default) between steps, V = sigmoid(g^k(X'))

The recurrent variants share a connection between consecutive steps, either
one batch-norm store per connection (non_shared), one store reused by every
connection (shared), or a parameter-free activation.
"""

import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .modules import BatchNormState, Module
from .tensor import Tensor, active_tape, resolve_dtype


class AttentionKind(str, Enum):
    """Attention variants selectable with --attention."""
    NONE = "none"
    SE = "se"
    SE_DEEP = "se_deep"
    SE_SHARED = "se_shared"
    ECA = "eca"
    ECA_SHARED = "eca_shared"
    RAS = "ras"


class BNMode(str, Enum):
    """Whether recurrence connections share one batch-norm store."""
    SHARED = "shared"
    NON_SHARED = "non_shared"


class Connection(str, Enum):
    """Map applied between recurrence steps."""
    BN = "bn"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


RECURRENT_KINDS = (AttentionKind.SE_DEEP, AttentionKind.SE_SHARED, AttentionKind.ECA_SHARED, AttentionKind.RAS)


class AttentionConfig(BaseModel):
    """Which attention variant to build and how."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttentionKind = AttentionKind.NONE
    implicit_depth: int = Field(default=2, ge=1)
    bn_mode: BNMode = BNMode.NON_SHARED
    connection: Connection = Connection.BN
    reduction: int = Field(default=16, ge=1)
    eca_kernel: Union[int, Literal["adaptive"]] = "adaptive"
    eca_gamma: int = Field(default=2, ge=1)
    eca_b: int = 1
    connect_se: bool = False  # SE recurrences use the connection too
    gamma_init: float = 1.0
    beta_init: float = 0.0

    @field_validator("eca_kernel")
    @classmethod
    def _odd_kernel(cls, value):
        if value != "adaptive" and (value < 1 or value % 2 == 0):
            raise ValueError(f"eca_kernel must be a positive odd integer or 'adaptive', got {value}")
        return value

    @property
    def uses_connection(self) -> bool:
        """True when steps of this variant are joined by the configured connection."""
        if self.kind in (AttentionKind.RAS, AttentionKind.ECA_SHARED):
            return True
        return self.kind in (AttentionKind.SE_DEEP, AttentionKind.SE_SHARED) and self.connect_se

    def connection_bn_count(self) -> int:
        """Number of distinct batch-norm stores the recurrence needs."""
        if not self.uses_connection or self.connection != Connection.BN or self.implicit_depth == 1:
            return 0
        if self.bn_mode == BNMode.SHARED:
            return 1
        return self.implicit_depth - 1

    def label(self) -> str:
        if self.kind == AttentionKind.NONE:
            return "none"
        if self.kind in RECURRENT_KINDS:
            return f"{self.kind.value}(k={self.implicit_depth},{self.bn_mode.value},{self.connection.value})"
        return self.kind.value


def bottleneck_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def adaptive_eca_kernel(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Odd kernel size |log2(C)/gamma + b/gamma|, at least 3."""
    t = int(abs((math.log2(channels) + b) / gamma))
    size = t if t % 2 else t + 1
    return max(3, size)


def eca_kernel_size(cfg: AttentionConfig, channels: int) -> int:
    if cfg.eca_kernel == "adaptive":
        return adaptive_eca_kernel(channels, cfg.eca_gamma, cfg.eca_b)
    return int(cfg.eca_kernel)


# Functional forms

def _se_transform(g: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return F.fully_connected(F.relu(F.fully_connected(g, w2)), w1)


def connect(g: Tensor, connection: Connection, bn_states: Sequence[BatchNormState], step: int) -> Tensor:
    """Apply the connection that precedes recurrence ``step`` (1-based connection index)."""
    if connection == Connection.BN:
        state = bn_states[0] if len(bn_states) == 1 else bn_states[step - 1]
        return F.batch_norm(g, state)
    return F.activation(g, connection.value)


def _check_connection(cfg: AttentionConfig, bn_states: Sequence[BatchNormState]):
    expected = cfg.connection_bn_count()
    if len(bn_states) != expected:
        raise ConfigurationError(
            f"{cfg.label()} needs {expected} batch-norm stores, got {len(bn_states)}"
        )


def se_forward(descriptor: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """V = sigmoid(W1 relu(W2 X')); w1 is [C, C/r], w2 is [C/r, C]."""
    return F.sigmoid(_se_transform(descriptor, w1, w2))


def se_deep_forward(
    descriptor: Tensor,
    weights: Sequence[Tuple[Tensor, Tensor]],
    connection: Optional[Connection] = None,
    bn_states: Sequence[BatchNormState] = (),
) -> Tensor:
    """Stacked SE transforms g^i = W1^i relu(W2^i g^{i-1}), then sigmoid."""
    if not weights:
        raise ConfigurationError("se_deep needs at least one (w1, w2) pair")
    g = descriptor
    for step, (w1, w2) in enumerate(weights, start=1):
        if step > 1 and connection is not None:
            g = connect(g, connection, bn_states, step - 1)
        g = _se_transform(g, w1, w2)
    return F.sigmoid(g)


def se_shared_forward(
    descriptor: Tensor,
    shared: Tuple[Tensor, Tensor],
    k: int,
    connection: Optional[Connection] = None,
    bn_states: Sequence[BatchNormState] = (),
) -> Tensor:
    """The se_deep recursion with a single pair reused at every step."""
    if k < 1:
        raise ConfigurationError(f"implicit depth must be >= 1, got {k}")
    return se_deep_forward(descriptor, [shared] * k, connection, bn_states)


def eca_forward(descriptor: Tensor, kernel: Tensor) -> Tensor:
    """V = sigmoid(zero-padded 1-D convolution over channels)."""
    return F.sigmoid(F.channel_conv1d(descriptor, kernel))


def eca_shared_forward(
    descriptor: Tensor,
    kernel: Tensor,
    k: int,
    connection: Connection = Connection.BN,
    bn_states: Sequence[BatchNormState] = (),
) -> Tensor:
    """One channel kernel applied k times with connections in between."""
    g = descriptor
    for step in range(1, k + 1):
        if step > 1:
            g = connect(g, connection, bn_states, step - 1)
        g = F.channel_conv1d(g, kernel)
    return F.sigmoid(g)


class RasParams(Module):
    """Shared linear-enhancement parameters plus the connection batch norms."""

    def __init__(self, channels: int, cfg: AttentionConfig, dtype=None):
        dtype = resolve_dtype(dtype)
        self.channels = channels
        self.gamma = Tensor(np.full(channels, cfg.gamma_init), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.full(channels, cfg.beta_init), requires_grad=True, dtype=dtype)
        self.bn_states = [BatchNormState(channels, dtype=dtype) for _ in range(cfg.connection_bn_count())]


def fold_recurrence(params: RasParams, cfg: AttentionConfig) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Per-channel (scale, shift) equal to the whole k-step recurrence, or None.

    Only affine connections fold: eval-mode batch norm and identity.
    """
    if cfg.connection not in (Connection.BN, Connection.IDENTITY):
        return None
    if any(state.training for state in params.bn_states):
        return None
    gamma, beta = params.gamma.data, params.beta.data
    scale, shift = gamma, beta
    for step in range(1, cfg.implicit_depth):
        if cfg.connection == Connection.BN:
            state = params.bn_states[0] if len(params.bn_states) == 1 else params.bn_states[step - 1]
            bn_scale = state.gamma.data / np.sqrt(state.running_var + state.eps)
            scale, shift = scale * bn_scale, (shift - state.running_mean) * bn_scale + state.beta.data
        scale, shift = scale * gamma, shift * gamma + beta
    return scale.astype(gamma.dtype, copy=False), shift.astype(beta.dtype, copy=False)


def ras_forward(descriptor: Tensor, params: RasParams, cfg: AttentionConfig) -> Tensor:
    """
    V = sigmoid(g(conn_{k-1}(... g(conn_1(g(X'))) ...))) with g(x) = x * gamma + beta.

    Outside a gradient tape a foldable recurrence runs as a single scale-shift.
    """
    if cfg.kind != AttentionKind.RAS:
        raise ConfigurationError(f"ras_forward called with kind {cfg.kind.value}")
    _check_connection(cfg, params.bn_states)
    if descriptor.ndim != 2 or descriptor.shape[1] != params.channels:
        raise DimensionError(f"ras_forward: descriptor {descriptor.shape} for {params.channels} channels")

    if cfg.implicit_depth > 1 and active_tape() is None:
        folded = fold_recurrence(params, cfg)
        if folded is not None:
            scale, shift = (Tensor(v, dtype=descriptor.dtype) for v in folded)
            return F.sigmoid(F.scale_shift(descriptor, scale, shift))

    g = descriptor
    for step in range(1, cfg.implicit_depth + 1):
        if step > 1:
            g = connect(g, cfg.connection, params.bn_states, step - 1)
        g = F.scale_shift(g, params.gamma, params.beta)
    return F.sigmoid(g)


# Attention modules

class Attention(Module):
    """Common interface: forward(descriptor [N,C]) -> V [N,C]."""

    def __init__(self, cfg: AttentionConfig, channels: int):
        self.cfg = cfg
        self.channels = channels

    def cost_terms(self) -> Dict[str, int]:
        """Multiply-adds per image of the attention transform, itemized."""
        return {}

    def _connection_cost(self, steps: int) -> Dict[str, int]:
        # eval-mode BN folds into one multiply-add per channel
        if steps == 0 or not self.cfg.uses_connection:
            return {}
        if self.cfg.connection == Connection.BN:
            return {"connection_bn": steps * self.channels}
        return {}


class NoAttention(Attention):
    """V = 1 everywhere; the block skips the rescale entirely."""

    def forward(self, descriptor: Tensor) -> Tensor:
        return Tensor(np.ones(descriptor.shape, dtype=descriptor.dtype))


class SEPair(Module):
    """One squeeze (w2) / excite (w1) weight pair, no biases."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator, dtype=None):
        dtype = resolve_dtype(dtype)
        self.w1 = Tensor(rng.normal(0.0, math.sqrt(1.0 / hidden), size=(channels, hidden)), requires_grad=True, dtype=dtype)
        self.w2 = Tensor(rng.normal(0.0, math.sqrt(2.0 / channels), size=(hidden, channels)), requires_grad=True, dtype=dtype)

    def as_tuple(self) -> Tuple[Tensor, Tensor]:
        return self.w1, self.w2


class SEAttention(Attention):
    def __init__(self, cfg: AttentionConfig, channels: int, rng: np.random.Generator, dtype=None):
        super().__init__(cfg, channels)
        self.hidden = bottleneck_width(channels, cfg.reduction)
        self.pair = SEPair(channels, self.hidden, rng, dtype)

    def forward(self, descriptor: Tensor) -> Tensor:
        return se_forward(descriptor, self.pair.w1, self.pair.w2)

    def cost_terms(self) -> Dict[str, int]:
        return {"se_fc": 2 * self.channels * self.hidden}


class DeepSEAttention(Attention):
    def __init__(self, cfg: AttentionConfig, channels: int, rng: np.random.Generator, dtype=None):
        super().__init__(cfg, channels)
        self.hidden = bottleneck_width(channels, cfg.reduction)
        self.pairs = [SEPair(channels, self.hidden, rng, dtype) for _ in range(cfg.implicit_depth)]
        self.bn_states = [BatchNormState(channels, dtype=dtype) for _ in range(cfg.connection_bn_count())]

    def forward(self, descriptor: Tensor) -> Tensor:
        connection = self.cfg.connection if self.cfg.connect_se else None
        return se_deep_forward(descriptor, [p.as_tuple() for p in self.pairs], connection, self.bn_states)

    def cost_terms(self) -> Dict[str, int]:
        k = self.cfg.implicit_depth
        return {"se_fc": k * 2 * self.channels * self.hidden, **self._connection_cost(k - 1)}


class SharedSEAttention(Attention):
    def __init__(self, cfg: AttentionConfig, channels: int, rng: np.random.Generator, dtype=None):
        super().__init__(cfg, channels)
        self.hidden = bottleneck_width(channels, cfg.reduction)
        self.pair = SEPair(channels, self.hidden, rng, dtype)
        self.bn_states = [BatchNormState(channels, dtype=dtype) for _ in range(cfg.connection_bn_count())]

    def forward(self, descriptor: Tensor) -> Tensor:
        connection = self.cfg.connection if self.cfg.connect_se else None
        return se_shared_forward(descriptor, self.pair.as_tuple(), self.cfg.implicit_depth, connection, self.bn_states)

    def cost_terms(self) -> Dict[str, int]:
        k = self.cfg.implicit_depth
        return {"se_fc": k * 2 * self.channels * self.hidden, **self._connection_cost(k - 1)}


class ECAAttention(Attention):
    def __init__(self, cfg: AttentionConfig, channels: int, rng: np.random.Generator, dtype=None):
        super().__init__(cfg, channels)
        self.kernel_size = eca_kernel_size(cfg, channels)
        bound = 1.0 / math.sqrt(self.kernel_size)
        self.kernel = Tensor(rng.uniform(-bound, bound, size=self.kernel_size), requires_grad=True, dtype=resolve_dtype(dtype))

    def forward(self, descriptor: Tensor) -> Tensor:
        return eca_forward(descriptor, self.kernel)

    def cost_terms(self) -> Dict[str, int]:
        return {"eca_conv": self.channels * self.kernel_size}


class SharedECAAttention(ECAAttention):
    def __init__(self, cfg: AttentionConfig, channels: int, rng: np.random.Generator, dtype=None):
        super().__init__(cfg, channels, rng, dtype)
        self.bn_states = [BatchNormState(channels, dtype=dtype) for _ in range(cfg.connection_bn_count())]

    def forward(self, descriptor: Tensor) -> Tensor:
        _check_connection(self.cfg, self.bn_states)
        return eca_shared_forward(descriptor, self.kernel, self.cfg.implicit_depth, self.cfg.connection, self.bn_states)

    def cost_terms(self) -> Dict[str, int]:
        k = self.cfg.implicit_depth
        return {"eca_conv": k * self.channels * self.kernel_size, **self._connection_cost(k - 1)}


class RASAttention(Attention):
    """Recurrent linear enhancement."""

    def __init__(self, cfg: AttentionConfig, channels: int, rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__(cfg, channels)
        self.params = RasParams(channels, cfg, dtype)

    def forward(self, descriptor: Tensor) -> Tensor:
        return ras_forward(descriptor, self.params, self.cfg)

    def cost_terms(self) -> Dict[str, int]:
        k = self.cfg.implicit_depth
        return {"scale_shift": k * self.channels, **self._connection_cost(k - 1)}


_BUILDERS = {
    AttentionKind.SE: SEAttention,
    AttentionKind.SE_DEEP: DeepSEAttention,
    AttentionKind.SE_SHARED: SharedSEAttention,
    AttentionKind.ECA: ECAAttention,
    AttentionKind.ECA_SHARED: SharedECAAttention,
    AttentionKind.RAS: RASAttention,
}


def make_attention(
    cfg: AttentionConfig,
    channels: int,
    rng: Optional[np.random.Generator] = None,
    dtype=None,
) -> Attention:
    """
    Build the attention module for ``channels``.

    The returned module is the callable forward; its parameters are available
    as ``named_parameters()``.
    """
    if channels < 1:
        raise ConfigurationError(f"attention needs at least one channel, got {channels}")
    kind = cfg.kind
    if kind == AttentionKind.NONE:
        return NoAttention(cfg, channels)
    builder = _BUILDERS.get(kind)
    if builder is None:
        raise ConfigurationError(f"unknown attention kind {kind!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return builder(cfg, channels, rng, dtype)


def attention_param_formula(cfg: AttentionConfig, channels: int) -> int:
    """Closed-form trainable parameter count of one attention module."""
    c = channels
    k = cfg.implicit_depth
    bn_params = 2 * c * cfg.connection_bn_count()
    if cfg.kind == AttentionKind.NONE:
        return 0
    if cfg.kind == AttentionKind.SE:
        return 2 * c * bottleneck_width(c, cfg.reduction)
    if cfg.kind == AttentionKind.SE_DEEP:
        return k * 2 * c * bottleneck_width(c, cfg.reduction) + bn_params
    if cfg.kind == AttentionKind.SE_SHARED:
        return 2 * c * bottleneck_width(c, cfg.reduction) + bn_params
    if cfg.kind == AttentionKind.ECA:
        return eca_kernel_size(cfg, c)
    if cfg.kind == AttentionKind.ECA_SHARED:
        return eca_kernel_size(cfg, c) + bn_params
    if cfg.kind == AttentionKind.RAS:
        return 2 * c + bn_params
    raise ConfigurationError(f"unknown attention kind {cfg.kind!r}")


def attention_kinds() -> List[str]:
    return [kind.value for kind in AttentionKind]
