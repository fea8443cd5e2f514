"""
Tests for the channel attention variants.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from rasnet.attention import (
    AttentionConfig,
    AttentionKind,
    BNMode,
    Connection,
    RasParams,
    adaptive_eca_kernel,
    attention_kinds,
    attention_param_formula,
    eca_forward,
    fold_recurrence,
    make_attention,
    ras_forward,
    se_forward,
    se_shared_forward,
)
from rasnet.errors import ConfigurationError, DimensionError
from rasnet.tensor import GradTape, Tensor, backward, precision


@pytest.fixture
def descriptor():
    """A float64 [N,C] descriptor."""
    rng = np.random.default_rng(7)
    return Tensor(rng.standard_normal((4, 32)), dtype=np.float64)


def test_adaptive_eca_kernel_sizes():
    """Test the adaptive kernel at the stage widths used by the backbones."""
    assert adaptive_eca_kernel(64) == 3
    assert adaptive_eca_kernel(128) == 5
    assert adaptive_eca_kernel(256) == 5
    assert adaptive_eca_kernel(2) == 3  # floor of 3


def test_config_validation():
    """Test even kernels, unknown fields and a zero depth are rejected."""
    with pytest.raises(ValidationError):
        AttentionConfig(kind="eca", eca_kernel=4)
    with pytest.raises(ValidationError):
        AttentionConfig(kind="ras", implicit_depth=0)
    with pytest.raises(ValidationError):
        AttentionConfig(kind="ras", depth=3)
    with pytest.raises(ValidationError):
        AttentionConfig(kind="cbam")
    assert AttentionConfig(kind="eca", eca_kernel=5).eca_kernel == 5


@pytest.mark.parametrize(
    "kwargs,expected",
    [
        ({"kind": "ras", "implicit_depth": 2}, 1),
        ({"kind": "ras", "implicit_depth": 4}, 3),
        ({"kind": "ras", "implicit_depth": 4, "bn_mode": "shared"}, 1),
        ({"kind": "ras", "implicit_depth": 4, "connection": "relu"}, 0),
        ({"kind": "ras", "implicit_depth": 1}, 0),
        ({"kind": "se_deep", "implicit_depth": 3}, 0),
        ({"kind": "se_deep", "implicit_depth": 3, "connect_se": True}, 2),
        ({"kind": "eca_shared", "implicit_depth": 3}, 2),
        ({"kind": "se"}, 0),
    ],
)
def test_connection_bn_count(kwargs, expected):
    """Test how many batch-norm stores each recurrence needs."""
    assert AttentionConfig(**kwargs).connection_bn_count() == expected


def test_ras_depth_one_is_sigmoid_of_affine(descriptor):
    """Test k=1 with identity init reduces to sigmoid of the descriptor."""
    with precision(np.float64):
        cfg = AttentionConfig(kind="ras", implicit_depth=1)
        out = ras_forward(descriptor, RasParams(32, cfg), cfg)
    np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-descriptor.data)), rtol=1e-12)


def test_ras_identity_connection_composes_affine(descriptor):
    """Test k=3 with identity connections equals the composed affine map."""
    with precision(np.float64):
        cfg = AttentionConfig(kind="ras", implicit_depth=3, connection="identity", gamma_init=0.5, beta_init=0.25)
        out = ras_forward(descriptor, RasParams(32, cfg), cfg)
    # g(g(g(x))) with g(x) = 0.5 x + 0.25
    z = 0.125 * descriptor.data + 0.25 * (0.25 + 0.5 + 1.0)
    np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-z)), rtol=1e-12)


def randomize_eval_ras(params, rng):
    """Non-trivial gamma, beta and eval-mode batch-norm statistics."""
    c = params.channels
    params.gamma.data[...] = rng.uniform(0.5, 1.5, c)
    params.beta.data[...] = rng.uniform(-0.5, 0.5, c)
    for state in params.bn_states:
        state.gamma.data[...] = rng.uniform(0.5, 1.5, c)
        state.beta.data[...] = rng.normal(0.0, 0.3, c)
        state.running_mean = rng.normal(0.0, 0.5, c)
        state.running_var = rng.uniform(0.5, 2.0, c)
        state.mode = "eval"


def ras_oracle(x, params, steps):
    gamma, beta = params.gamma.data, params.beta.data
    g = x * gamma + beta
    for step in range(1, steps):
        state = params.bn_states[0] if len(params.bn_states) == 1 else params.bn_states[step - 1]
        g = (g - state.running_mean) / np.sqrt(state.running_var + state.eps) * state.gamma.data + state.beta.data
        g = g * gamma + beta
    return 1 / (1 + np.exp(-g))


@pytest.mark.parametrize("bn_mode", ["non_shared", "shared"])
def test_ras_eval_batch_norm_recurrence(descriptor, bn_mode):
    """Test k=3 with eval-mode batch-norm connections against a step-by-step computation."""
    with precision(np.float64):
        cfg = AttentionConfig(kind="ras", implicit_depth=3, bn_mode=bn_mode)
        params = RasParams(32, cfg)
        randomize_eval_ras(params, np.random.default_rng(3))
        folded = ras_forward(descriptor, params, cfg)
        with GradTape():
            stepped = ras_forward(descriptor, params, cfg)
    assert len(params.bn_states) == (2 if bn_mode == "non_shared" else 1)
    expected = ras_oracle(descriptor.data, params, 3)
    np.testing.assert_allclose(stepped.data, expected, rtol=1e-12)
    np.testing.assert_allclose(folded.data, expected, rtol=1e-12)


def test_fold_needs_affine_eval_connections():
    """Test train-mode batch norm and nonlinear connections do not fold."""
    with precision(np.float64):
        cfg = AttentionConfig(kind="ras", implicit_depth=3)
        params = RasParams(8, cfg)
        assert fold_recurrence(params, cfg) is None
        randomize_eval_ras(params, np.random.default_rng(0))
        scale, shift = fold_recurrence(params, cfg)
        relu = AttentionConfig(kind="ras", implicit_depth=3, connection="relu")
        assert fold_recurrence(RasParams(8, relu), relu) is None
    assert scale.shape == shift.shape == (8,)
    assert scale.dtype == np.float64


def test_ras_output_range_and_shape(descriptor):
    """Test the attention map is [N,C] inside (0,1) and gradients reach gamma and beta."""
    with precision(np.float64):
        attn = make_attention(AttentionConfig(kind="ras", implicit_depth=3), 32)
        with GradTape() as tape:
            out = attn(descriptor)
            backward(out.sum(), tape)
    assert out.shape == (4, 32)
    assert ((out.data > 0) & (out.data < 1)).all()
    assert attn.params.gamma.grad is not None and attn.params.beta.grad is not None


def test_ras_rejects_wrong_kind_and_shape(descriptor):
    """Test ras_forward refuses other kinds and mismatched channels."""
    cfg = AttentionConfig(kind="ras")
    with pytest.raises(ConfigurationError):
        ras_forward(descriptor, RasParams(32, cfg), AttentionConfig(kind="se"))
    with pytest.raises(DimensionError):
        ras_forward(descriptor, RasParams(16, cfg), cfg)


def test_se_shared_depth_one_equals_se(descriptor):
    """Test one shared step is the plain SE transform."""
    with precision(np.float64):
        attn = make_attention(AttentionConfig(kind="se", reduction=8), 32)
        w1, w2 = attn.pair.as_tuple()
        np.testing.assert_allclose(
            se_shared_forward(descriptor, (w1, w2), 1).data, se_forward(descriptor, w1, w2).data, rtol=1e-12
        )


def test_eca_center_tap_kernel(descriptor):
    """Test a [0,1,0] kernel gives sigmoid of the descriptor."""
    out = eca_forward(descriptor, Tensor([0.0, 1.0, 0.0], dtype=np.float64))
    np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-descriptor.data)), rtol=1e-12)


def test_no_attention_is_ones(descriptor):
    """Test the none variant returns a map of ones."""
    out = make_attention(AttentionConfig(), 32)(descriptor)
    np.testing.assert_array_equal(out.data, np.ones((4, 32)))


@pytest.mark.parametrize("kind", attention_kinds())
@pytest.mark.parametrize("channels", [16, 64, 256])
def test_formula_matches_counted_parameters(kind, channels):
    """Test the closed-form parameter count against the built module."""
    cfg = AttentionConfig(kind=kind, implicit_depth=3, connect_se=True)
    attn = make_attention(cfg, channels)
    assert attn.num_parameters() == attention_param_formula(cfg, channels)


def test_parameter_laws():
    """Test RAS adds 2C per block and each extra non-shared connection adds 2C."""
    c = 64
    base = attention_param_formula(AttentionConfig(kind="ras", implicit_depth=1), c)
    assert base == 2 * c
    assert attention_param_formula(AttentionConfig(kind="ras", implicit_depth=2), c) == 4 * c
    assert attention_param_formula(AttentionConfig(kind="ras", implicit_depth=5), c) == 2 * c + 4 * 2 * c
    shared = AttentionConfig(kind="ras", implicit_depth=5, bn_mode=BNMode.SHARED)
    assert attention_param_formula(shared, c) == 4 * c
    act = AttentionConfig(kind="ras", implicit_depth=5, connection=Connection.TANH)
    assert attention_param_formula(act, c) == 2 * c
    assert attention_param_formula(AttentionConfig(kind="se"), 256) == 2 * 256 * 16


def test_cost_terms_scale_with_depth():
    """Test doubling the recurrence depth doubles the scale-shift cost, and RAS is cheaper than SE."""
    k2 = make_attention(AttentionConfig(kind="ras", implicit_depth=2), 256).cost_terms()
    k4 = make_attention(AttentionConfig(kind="ras", implicit_depth=4), 256).cost_terms()
    assert k4["scale_shift"] == 2 * k2["scale_shift"]
    assert k2["connection_bn"] == 256 and k4["connection_bn"] == 3 * 256

    se = make_attention(AttentionConfig(kind="se"), 256).cost_terms()
    assert sum(k2.values()) < sum(se.values())


def test_make_attention_rejects_empty_channels():
    """Test zero channels is a configuration error."""
    with pytest.raises(ConfigurationError):
        make_attention(AttentionConfig(kind=AttentionKind.RAS), 0)
