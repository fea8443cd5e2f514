"""
Tests for the pre-activation bottleneck ResNet and its parameter budget.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from rasnet.attention import AttentionConfig
from rasnet.backbone import BlockSpec, ModelSpec, PreActBottleneck, block_forward, build_model, model_forward
from rasnet.errors import ConfigurationError, DimensionError
from rasnet.tensor import Tensor, precision


# Exact totals for the CIFAR-10 heads; CIFAR-100 adds 256 * 90 + 90 to the FC layer
RESNET164_BASE = 1_703_258
RESNET83_BASE = 868_634
EXTRA = {
    "resnet164": {"none": 0, "ras": 32_256, "se": 193_536, "eca": 234},
    "resnet83": {"none": 0, "ras": 16_128, "se": 96_768, "eca": 117},
}

# Reported model sizes in millions of parameters
PUBLISHED_MILLIONS = {
    ("resnet164", 10): {"none": 1.70, "ras": 1.74, "se": 1.91, "eca": 1.70},
    ("resnet164", 100): {"none": 1.73, "ras": 1.76, "se": 1.93, "eca": 1.73},
    ("resnet83", 10): {"none": 0.87, "ras": 0.89, "se": 0.97, "eca": 0.87},
    ("resnet83", 100): {"none": 0.89, "ras": 0.91, "se": 0.99, "eca": 0.89},
}


def make_spec(name, num_classes, kind):
    factory = ModelSpec.resnet164 if name == "resnet164" else ModelSpec.resnet83
    return factory(num_classes=num_classes, attention=AttentionConfig(kind=kind))


def test_depths():
    """Test depth = 9n + 2 for both backbones."""
    assert ModelSpec.resnet164().depth == 164
    assert ModelSpec.resnet83().depth == 83


@pytest.mark.parametrize("name,base", [("resnet164", RESNET164_BASE), ("resnet83", RESNET83_BASE)])
@pytest.mark.parametrize("kind", ["none", "ras", "se", "eca"])
def test_exact_parameter_counts(name, base, kind):
    """Test exact totals for CIFAR-10 heads."""
    model = build_model(make_spec(name, 10, kind))
    assert model.num_parameters() == base + EXTRA[name][kind]


@pytest.mark.parametrize("name,num_classes", list(PUBLISHED_MILLIONS))
def test_parameter_counts_match_published_sizes(name, num_classes):
    """Test every model lands within 2% of its reported size."""
    for kind, published in PUBLISHED_MILLIONS[(name, num_classes)].items():
        total = build_model(make_spec(name, num_classes, kind)).num_parameters()
        assert total / 1e6 == pytest.approx(published, rel=0.02), (name, num_classes, kind)


@pytest.mark.parametrize("name", ["resnet164", "resnet83"])
def test_ras_overhead_is_small(name):
    """Test the recurrent attention adds under 3% to the backbone, far below SE."""
    base = build_model(make_spec(name, 10, "none")).num_parameters()
    ras = build_model(make_spec(name, 10, "ras")).num_parameters()
    se = build_model(make_spec(name, 10, "se")).num_parameters()
    assert (ras - base) / base < 0.03
    assert ras - base < (se - base) / 5


def test_backbone_identical_across_attention_kinds():
    """Test non-attention parameter names and initial values do not depend on the attention kind."""
    none = dict(build_model(ModelSpec.micro(), seed=4).named_parameters())
    for kind in ("se", "eca", "ras"):
        other = build_model(ModelSpec.micro(attention=AttentionConfig(kind=kind)), seed=4)
        backbone = {n: p for n, p in other.named_parameters() if ".attention." not in n}
        assert list(backbone) == list(none)
        for name, param in backbone.items():
            np.testing.assert_array_equal(param.data, none[name].data)


def test_build_is_deterministic():
    """Test the same seed gives the same weights and another seed does not."""
    spec = ModelSpec.micro(attention=AttentionConfig(kind="se", reduction=4))
    a, b, c = build_model(spec, seed=1), build_model(spec, seed=1), build_model(spec, seed=2)
    for (name, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert not np.array_equal(a.stem.weight.data, c.stem.weight.data)


def test_forward_shape_and_resolution_check():
    """Test logits shape and rejection of a wrong input resolution."""
    model = build_model(ModelSpec.micro(num_classes=3, attention=AttentionConfig(kind="ras")))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 16, 16)))
    assert model_forward(model, x, "train").shape == (2, 3)
    assert model_forward(model, Tensor(x.data[:1]), "eval").shape == (1, 3)
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((2, 3, 32, 32))))
    with pytest.raises(ConfigurationError):
        model_forward(model, x, "inference")


def test_no_attention_block_is_plain_residual():
    """Test the none block output is shortcut + residual branch."""
    with precision(np.float64):
        spec = BlockSpec(in_channels=8, bottleneck_channels=4, out_channels=16, stride=2)
        block = PreActBottleneck(spec, np.random.default_rng(0))
        block.eval()
        x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 6, 6)))
        shortcut, h = block.residual(x)
        out = block_forward(x, block)
    assert out.shape == (2, 16, 3, 3)
    np.testing.assert_allclose(out.data, shortcut.data + h.data)


def test_attention_block_rescales_residual():
    """Test the attention block output is shortcut + residual * V."""
    with precision(np.float64):
        cfg = AttentionConfig(kind="ras", implicit_depth=1)
        spec = BlockSpec(in_channels=16, bottleneck_channels=4, out_channels=16, attention=cfg)
        block = PreActBottleneck(spec, np.random.default_rng(0))
        block.eval()
        x = Tensor(np.random.default_rng(1).standard_normal((2, 16, 4, 4)))
        shortcut, h = block.residual(x)
        out = block_forward(x, block)
    v = 1 / (1 + np.exp(-h.data.mean(axis=(2, 3))))
    assert block.shortcut is None
    np.testing.assert_allclose(out.data, shortcut.data + h.data * v[:, :, None, None], rtol=1e-12)



def test_two_step_ras_block_rescales_residual():
    """Test a k=2 RAS block against its batch-norm-connected recurrence computed by hand."""
    rng = np.random.default_rng(5)
    with precision(np.float64):
        cfg = AttentionConfig(kind="ras", implicit_depth=2)
        spec = BlockSpec(in_channels=8, bottleneck_channels=4, out_channels=16, stride=2, attention=cfg)
        block = PreActBottleneck(spec, np.random.default_rng(0))
        params = block.attention.params
        params.gamma.data[...] = rng.uniform(0.5, 1.5, 16)
        params.beta.data[...] = rng.uniform(-0.5, 0.5, 16)
        (state,) = params.bn_states
        state.gamma.data[...] = rng.uniform(0.5, 1.5, 16)
        state.beta.data[...] = rng.normal(0.0, 0.3, 16)
        state.running_mean = rng.normal(0.0, 0.5, 16)
        state.running_var = rng.uniform(0.5, 2.0, 16)
        block.eval()
        x = Tensor(rng.standard_normal((2, 8, 6, 6)))
        shortcut, h = block.residual(x)
        out = block_forward(x, block)
    gamma, beta = params.gamma.data, params.beta.data
    g = h.data.mean(axis=(2, 3)) * gamma + beta
    g = (g - state.running_mean) / np.sqrt(state.running_var + state.eps) * state.gamma.data + state.beta.data
    v = 1 / (1 + np.exp(-(g * gamma + beta)))
    assert out.shape == (2, 16, 3, 3)
    np.testing.assert_allclose(out.data, shortcut.data + h.data * v[:, :, None, None], rtol=1e-10, atol=1e-12)

def test_block_and_model_validation():
    """Test the bottleneck expansion rule and degenerate model plans."""
    with pytest.raises(ValidationError):
        BlockSpec(in_channels=8, bottleneck_channels=4, out_channels=8)
    with pytest.raises(ValidationError):
        BlockSpec(in_channels=8, bottleneck_channels=4, out_channels=16, stride=3)
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec.micro(blocks_per_stage=0))
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec.micro(stage_widths=(8, 0, 32)))
