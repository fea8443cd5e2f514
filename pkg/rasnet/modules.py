"""
Parameter-owning building blocks.

A Module exposes its trainable tensors through ``named_parameters`` with
dotted names derived from attribute names (lists are indexed), so that the
optimizer, parameter accounting and checkpoints all see the same names.
"""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError, ContractError
from .tensor import Tensor, resolve_dtype


class Module:
    """Base class for everything that owns parameters."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _named_members(self, prefix: str = "") -> Iterator[Tuple[str, object]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    yield f"{prefix}{attr}.{index}", item
            else:
                yield f"{prefix}{attr}", value

    def named_modules(self, prefix: str = "", _seen=None) -> Iterator[Tuple[str, "Module"]]:
        seen = _seen if _seen is not None else set()
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix.rstrip("."), self
        for name, value in self._named_members(prefix):
            if isinstance(value, Module):
                yield from value.named_modules(f"{name}.", seen)

    def modules(self) -> Iterator["Module"]:
        for _, module in self.named_modules():
            yield module

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Trainable tensors, each listed once even when shared."""
        params: List[Tuple[str, Tensor]] = []
        seen = set()
        for module_name, module in self.named_modules():
            prefix = f"{module_name}." if module_name else ""
            for attr, value in vars(module).items():
                if isinstance(value, Tensor) and value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    params.append((f"{prefix}{attr}", value))
        return params

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for module_name, module in self.named_modules():
            if isinstance(module, BatchNormState):
                prefix = f"{module_name}." if module_name else ""
                state[f"{prefix}running_mean"] = module.running_mean.copy()
                state[f"{prefix}running_var"] = module.running_var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        current = self.state_dict()
        missing = sorted(set(current) - set(state))
        unexpected = sorted(set(state) - set(current))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, value in current.items():
            if state[name].shape != value.shape:
                raise ContractError(f"{name}: expected shape {value.shape}, got {state[name].shape}")

        params = dict(self.named_parameters())
        for name, p in params.items():
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
        for module_name, module in self.named_modules():
            if isinstance(module, BatchNormState):
                prefix = f"{module_name}." if module_name else ""
                module.running_mean = np.array(state[f"{prefix}running_mean"], dtype=module.running_mean.dtype)
                module.running_var = np.array(state[f"{prefix}running_var"], dtype=module.running_var.dtype)


class BatchNormState(Module):
    """Per-channel affine parameters and running statistics of one batch-norm layer."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(f"batch-norm momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise ConfigurationError(f"batch-norm epsilon must be positive, got {eps}")
        dtype = resolve_dtype(dtype)
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    @mode.setter
    def mode(self, value: str):
        if value not in ("train", "eval"):
            raise ConfigurationError(f"batch-norm mode must be 'train' or 'eval', got {value!r}")
        self.training = value == "train"

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(self.running_var.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self)


class Conv2d(Module):
    """Bias-free 2-D convolution with fan-out scaled Gaussian initialization."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (kernel_size * kernel_size * out_channels))
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)),
            requires_grad=True,
            dtype=resolve_dtype(dtype),
        )

    def output_size(self, size: int) -> int:
        return F.conv_output_size(size, self.kernel_size, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.stride, self.padding)


class Linear(Module):
    """Fully-connected layer; zero-initialized bias."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = resolve_dtype(dtype)
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_features, in_features)), requires_grad=True, dtype=dtype
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.fully_connected(x, self.weight, self.bias)
