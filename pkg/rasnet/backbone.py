"""
Pre-activation bottleneck ResNet-d (d = 9n + 2) for 32x32 inputs, with a
channel attention module inside every residual block:

    Y = shortcut(X) + f(X) * V,   V = attention(GAP(f(X)))
"""

import logging
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import functional as F
from .attention import Attention, AttentionConfig, AttentionKind, make_attention
from .errors import ConfigurationError, DimensionError
from .modules import BatchNormState, Conv2d, Linear, Module
from .tensor import Tensor, resolve_dtype

logger = logging.getLogger(__name__)

EXPANSION = 4


class BlockSpec(BaseModel):
    """Shape plan of one bottleneck block."""

    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(ge=1)
    bottleneck_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    stride: Literal[1, 2] = 1
    attention: AttentionConfig = AttentionConfig()

    @model_validator(mode="after")
    def _expansion(self):
        if self.out_channels != EXPANSION * self.bottleneck_channels:
            raise ValueError(
                f"out_channels ({self.out_channels}) must be {EXPANSION} x bottleneck_channels ({self.bottleneck_channels})"
            )
        return self

    @property
    def projects(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


class ModelSpec(BaseModel):
    """Depth/width plan of a ResNet-d."""

    model_config = ConfigDict(frozen=True)

    name: str = "resnet164"
    blocks_per_stage: int = 18
    stage_widths: Tuple[int, int, int] = (16, 32, 64)
    num_classes: int = Field(default=10, ge=1)
    attention: AttentionConfig = AttentionConfig()
    input_resolution: Tuple[int, int] = (32, 32)

    @property
    def depth(self) -> int:
        return 9 * self.blocks_per_stage + 2

    @property
    def stem_channels(self) -> int:
        return self.stage_widths[0]

    def block_specs(self) -> List[List[BlockSpec]]:
        """Per-stage block plans; stages after the first open with stride 2."""
        stages = []
        in_channels = self.stem_channels
        for index, width in enumerate(self.stage_widths):
            blocks = []
            for position in range(self.blocks_per_stage):
                stride = 2 if index > 0 and position == 0 else 1
                blocks.append(BlockSpec(
                    in_channels=in_channels,
                    bottleneck_channels=width,
                    out_channels=EXPANSION * width,
                    stride=stride,
                    attention=self.attention,
                ))
                in_channels = EXPANSION * width
            stages.append(blocks)
        return stages

    @classmethod
    def resnet164(cls, num_classes: int = 10, attention: Optional[AttentionConfig] = None) -> "ModelSpec":
        return cls(name="resnet164", blocks_per_stage=18, num_classes=num_classes, attention=attention or AttentionConfig())

    @classmethod
    def resnet83(cls, num_classes: int = 10, attention: Optional[AttentionConfig] = None) -> "ModelSpec":
        return cls(name="resnet83", blocks_per_stage=9, num_classes=num_classes, attention=attention or AttentionConfig())

    @classmethod
    def micro(
        cls,
        blocks_per_stage: int = 2,
        stage_widths: Tuple[int, int, int] = (8, 16, 32),
        num_classes: int = 2,
        attention: Optional[AttentionConfig] = None,
        input_resolution: Tuple[int, int] = (16, 16),
    ) -> "ModelSpec":
        return cls(
            name="micro",
            blocks_per_stage=blocks_per_stage,
            stage_widths=tuple(stage_widths),
            num_classes=num_classes,
            attention=attention or AttentionConfig(),
            input_resolution=tuple(input_resolution),
        )


class PreActBottleneck(Module):
    """BN-ReLU-conv1x1, BN-ReLU-conv3x3, BN-ReLU-conv1x1 with attention on the residual branch."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype=None, attention_rng: Optional[np.random.Generator] = None):
        self.spec = spec
        b = spec.bottleneck_channels
        self.bn1 = BatchNormState(spec.in_channels, dtype=dtype)
        self.conv1 = Conv2d(spec.in_channels, b, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNormState(b, dtype=dtype)
        self.conv2 = Conv2d(b, b, 3, stride=spec.stride, padding=1, rng=rng, dtype=dtype)
        self.bn3 = BatchNormState(b, dtype=dtype)
        self.conv3 = Conv2d(b, spec.out_channels, 1, rng=rng, dtype=dtype)
        self.shortcut = Conv2d(spec.in_channels, spec.out_channels, 1, stride=spec.stride, rng=rng, dtype=dtype) if spec.projects else None
        self.attention = make_attention(spec.attention, spec.out_channels, rng=attention_rng, dtype=dtype)

    def residual(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns (shortcut(X), f(X))."""
        pre = F.relu(self.bn1(x))
        shortcut = self.shortcut(pre) if self.shortcut is not None else x
        h = self.conv1(pre)
        h = self.conv2(F.relu(self.bn2(h)))
        h = self.conv3(F.relu(self.bn3(h)))
        return shortcut, h

    def forward(self, x: Tensor) -> Tensor:
        return block_forward(x, self)


def block_forward(x: Tensor, block: PreActBottleneck) -> Tensor:
    """Y = shortcut(X) + f(X) * V with V broadcast over H x W."""
    spec = block.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"block expects [N,{spec.in_channels},H,W], got {x.shape}")
    if block.attention.channels != spec.out_channels:
        raise ConfigurationError(
            f"attention built for {block.attention.channels} channels, block outputs {spec.out_channels}"
        )
    shortcut, h = block.residual(x)
    if spec.attention.kind == AttentionKind.NONE:
        return shortcut + h
    v = block.attention(F.global_avg_pool(h))
    n, c = v.shape
    return shortcut + h * v.reshape(n, c, 1, 1)


class Stage(Module):
    def __init__(self, specs: List[BlockSpec], rng: np.random.Generator, dtype=None, attention_rng=None):
        self.blocks = [PreActBottleneck(spec, rng, dtype, attention_rng) for spec in specs]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class ResNet(Module):
    """Stem conv, three bottleneck stages, BN-ReLU-GAP-FC head."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=None, attention_rng=None):
        self.spec = spec
        self.stem = Conv2d(3, spec.stem_channels, 3, padding=1, rng=rng, dtype=dtype)
        self.stages = [Stage(specs, rng, dtype, attention_rng) for specs in spec.block_specs()]
        final_channels = EXPANSION * spec.stage_widths[-1]
        self.bn_final = BatchNormState(final_channels, dtype=dtype)
        self.fc = Linear(final_channels, spec.num_classes, rng=rng, dtype=dtype)

    def blocks(self) -> List[PreActBottleneck]:
        return [block for stage in self.stages for block in stage.blocks]

    def features(self, x: Tensor) -> Tensor:
        """Pooled [N, C_final] features ahead of the classifier."""
        expected = tuple(self.spec.input_resolution)
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != expected:
            raise DimensionError(f"model expects [N,3,{expected[0]},{expected[1]}], got {x.shape}")
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return F.global_avg_pool(F.relu(self.bn_final(h)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.features(x))


def build_model(spec: ModelSpec, seed: int = 0, dtype=None) -> ResNet:
    """
    Deterministically initialize a model from ``seed``.

    The named parameter list is ``model.named_parameters()``; backbone names
    are identical across attention kinds, attention parameters sit under
    ``*.attention.*``.
    """
    if spec.blocks_per_stage < 1:
        raise ConfigurationError(f"blocks_per_stage must be >= 1, got {spec.blocks_per_stage}")
    if any(w < 1 for w in spec.stage_widths):
        raise ConfigurationError(f"stage widths must be positive, got {spec.stage_widths}")
    # separate streams keep backbone weights identical across attention kinds
    rng = np.random.default_rng(seed)
    attention_rng = np.random.default_rng((seed, 1))
    model = ResNet(spec, rng, resolve_dtype(dtype), attention_rng)
    logger.debug("built %s depth %d (%s), %d parameters", spec.name, spec.depth, spec.attention.label(), model.num_parameters())
    return model


def model_forward(model: ResNet, x: Tensor, mode: str = "eval") -> Tensor:
    """Forward in train or eval mode; train mode updates batch-norm running statistics."""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(x)
