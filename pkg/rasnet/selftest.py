"""
Self-verification suite: finite-difference gradient checks of every
primitive and of a full attention block, degeneracy identities, the
weight-sharing gradient identity and closed-form parameter/cost laws.

Everything runs on micro-models at float64 and is deterministic, so two
runs produce identical summaries.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from . import functional as F
from .analysis import attention_formula_total, count_params
from .attention import (
    AttentionConfig,
    AttentionKind,
    BNMode,
    Connection,
    RasParams,
    connect,
    eca_forward,
    eca_shared_forward,
    make_attention,
    ras_forward,
    se_deep_forward,
    se_forward,
    se_shared_forward,
)
from .audit_logger import EventType, LogLevel, get_audit_logger
from .backbone import BlockSpec, ModelSpec, PreActBottleneck, build_model
from .errors import RasnetError
from .modules import BatchNormState
from .tensor import GradTape, Tensor, backward, precision

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
SHARING_TOLERANCE = 1e-6
MAX_KINK_FRACTION = 0.05
# one-sided slopes of a smooth function differ by about |f''| * eps
KINK_FLOOR = 1e-4
PROJECTION_STREAM = 7


class GradcheckResult(BaseModel):
    max_rel_error: float
    checked: int
    skipped: int
    passed: bool


class CheckResult(BaseModel):
    """Outcome of one named check."""
    name: str
    module: str
    op: str
    passed: bool
    detail: str = ""
    max_rel_error: Optional[float] = None


class SelftestSummary(BaseModel):
    passed: bool
    checks: List[CheckResult]

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def render(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            err = f" max_rel_err={c.max_rel_error:.3e}" if c.max_rel_error is not None else ""
            lines.append(f"{status} {c.module}/{c.op} [{c.name}]{err} {c.detail}".rstrip())
        lines.append(f"{len(self.checks) - len(self.failures)}/{len(self.checks)} checks passed")
        return "\n".join(lines)


# Finite differences

def _projected(out: Tensor, projection: np.ndarray) -> float:
    return float((out.data * projection).sum())


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    eps: float = FD_STEP,
    tol: float = GRAD_TOLERANCE,
    max_coords: Optional[int] = None,
) -> GradcheckResult:
    """
    Compare tape gradients of sum(fn() * R) against central differences.

    R is a fixed random projection so every output element contributes; it
    comes from its own stream and never coincides with inputs drawn from ``seed``.
    Relative error is |a - n| / max(|a|, |n|, 1e-3). Coordinates where the
    one-sided differences disagree by more than KINK_FLOOR and by more than 1%
    sit on a kink (e.g. relu at 0) and are skipped; more than 5% skipped
    coordinates fails the check.
    """
    rng = np.random.default_rng((seed, PROJECTION_STREAM))
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    with GradTape() as tape:
        out = fn()
        projection = rng.standard_normal(out.shape)
        loss = (out * Tensor(projection, dtype=out.dtype)).sum()
        backward(loss, tape)

    base = _projected(fn(), projection)
    max_err, checked, skipped = 0.0, 0, 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            plus = _projected(fn(), projection)
            flat[i] = original - eps
            minus = _projected(fn(), projection)
            flat[i] = original

            forward_d = (plus - base) / eps
            backward_d = (base - minus) / eps
            gap = abs(forward_d - backward_d)
            if gap > KINK_FLOOR and gap > 1e-2 * max(abs(forward_d), abs(backward_d)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            max_err = max(max_err, err)
            checked += 1
        t.zero_grad()

    total = checked + skipped
    passed = max_err < tol and (total == 0 or skipped / total <= MAX_KINK_FRACTION)
    return GradcheckResult(max_rel_error=max_err, checked=checked, skipped=skipped, passed=passed)


def _t(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _bn_state(rng: np.random.Generator, channels: int) -> BatchNormState:
    state = BatchNormState(channels)
    state.gamma.data = rng.uniform(0.5, 1.5, channels)
    state.beta.data = rng.standard_normal(channels) * 0.1
    state.running_mean = rng.standard_normal(channels) * 0.1
    state.running_var = rng.uniform(0.5, 1.5, channels)
    return state


def _worst(results: Sequence[GradcheckResult]) -> GradcheckResult:
    return GradcheckResult(
        max_rel_error=max(r.max_rel_error for r in results),
        checked=sum(r.checked for r in results),
        skipped=sum(r.skipped for r in results),
        passed=all(r.passed for r in results),
    )


# Gradient checks, one per primitive

def grad_conv2d(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    results = []
    for shape, kernel, stride, padding in (((2, 3, 5, 5), 3, 2, 1), ((2, 3, 4, 4), 1, 1, 0), ((1, 2, 5, 5), 3, 1, 0)):
        x = _t(rng, *shape)
        w = _t(rng, 4, shape[1], kernel, kernel, scale=0.5)
        results.append(gradcheck(lambda: F.conv2d(x, w, stride, padding), [x, w], seed))
    return _worst(results)


def grad_batch_norm(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    results = []
    for mode in ("train", "eval"):
        x = _t(rng, 4, 3, 2, 2)
        state = _bn_state(rng, 3)
        state.mode = mode
        results.append(gradcheck(lambda: F.batch_norm(x, state), [x, state.gamma, state.beta], seed))
    x2 = _t(rng, 5, 3)
    state2 = _bn_state(rng, 3)
    results.append(gradcheck(lambda: F.batch_norm(x2, state2), [x2, state2.gamma, state2.beta], seed))
    return _worst(results)


def grad_gap(seed: int) -> GradcheckResult:
    x = _t(np.random.default_rng(seed), 2, 3, 4, 4)
    return gradcheck(lambda: F.global_avg_pool(x), [x], seed)


def grad_fully_connected(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)
    return _worst([
        gradcheck(lambda: F.fully_connected(x, w, b), [x, w, b], seed),
        gradcheck(lambda: F.fully_connected(x, w), [x, w], seed),
    ])


def grad_activation(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    results = []
    for kind in F.ACTIVATIONS:
        x = _t(rng, 3, 4, scale=2.0)
        results.append(gradcheck(lambda: F.activation(x, kind), [x], seed))
    return _worst(results)


def grad_scale_shift(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    x, gamma, beta = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    return gradcheck(lambda: F.scale_shift(x, gamma, beta), [x, gamma, beta], seed)


def grad_channel_conv1d(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    results = []
    for size in (1, 3, 5):
        x, k = _t(rng, 2, 8), _t(rng, size)
        results.append(gradcheck(lambda: F.channel_conv1d(x, k), [x, k], seed))
    return _worst(results)


def grad_cross_entropy(seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    logits = _t(rng, 4, 5, scale=2.0)
    labels = rng.integers(0, 5, size=4)
    return gradcheck(lambda: F.cross_entropy(logits, labels), [logits], seed)


def grad_ras_block(seed: int, implicit_depth: int = 2, bn_mode: BNMode = BNMode.NON_SHARED) -> GradcheckResult:
    """A full bottleneck block with recurrent linear-enhancement attention."""
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(kind=AttentionKind.RAS, implicit_depth=implicit_depth, bn_mode=bn_mode)
    block = PreActBottleneck(BlockSpec(in_channels=4, bottleneck_channels=2, out_channels=8, stride=2, attention=cfg), rng)
    block.attention.params.gamma.data = rng.uniform(0.5, 1.5, 8)
    block.attention.params.beta.data = rng.standard_normal(8) * 0.1
    block.train()
    x = _t(rng, 4, 4, 4, 4)
    return gradcheck(lambda: block(x), [x] + block.parameters(), seed, max_coords=24)


def grad_pipeline(seed: int) -> GradcheckResult:
    """Loss of a whole micro-model with respect to input and weights."""
    rng = np.random.default_rng(seed)
    attention = AttentionConfig(kind=AttentionKind.RAS, implicit_depth=2)
    spec = ModelSpec.micro(blocks_per_stage=1, stage_widths=(2, 2, 2), num_classes=3, attention=attention, input_resolution=(8, 8))
    model = build_model(spec, seed)
    model.train()
    x = _t(rng, 4, 3, 8, 8)
    labels = np.arange(4) % 3
    return gradcheck(lambda: F.cross_entropy(model(x), labels), [x] + model.parameters(), seed, max_coords=4)


GRAD_CHECKS: Dict[str, Tuple[str, Callable[[int], GradcheckResult]]] = {
    "conv2d": ("functional", grad_conv2d),
    "batch_norm": ("functional", grad_batch_norm),
    "global_avg_pool": ("functional", grad_gap),
    "fully_connected": ("functional", grad_fully_connected),
    "activation": ("functional", grad_activation),
    "scale_shift": ("functional", grad_scale_shift),
    "channel_conv1d": ("functional", grad_channel_conv1d),
    "cross_entropy": ("functional", grad_cross_entropy),
    "ras_block": ("backbone", grad_ras_block),
    "pipeline": ("backbone", grad_pipeline),
}


# Identities

def degeneracy_identities(seed: int = 0) -> List[CheckResult]:
    """k=1 recurrences and attention=none blocks collapse to their plain forms bit-exactly."""
    rng = np.random.default_rng(seed)
    c = 16
    desc = _t(rng, 4, c)
    results = []

    cfg = AttentionConfig(kind=AttentionKind.RAS, implicit_depth=1, gamma_init=1.3, beta_init=-0.2)
    params = RasParams(c, cfg)
    same = np.array_equal(ras_forward(desc, params, cfg).data, F.sigmoid(F.scale_shift(desc, params.gamma, params.beta)).data)
    results.append(CheckResult(name="ras_k1", module="attention", op="ras_forward", passed=same))

    w1, w2 = _t(rng, c, 4), _t(rng, 4, c)
    plain = se_forward(desc, w1, w2).data
    same = np.array_equal(se_deep_forward(desc, [(w1, w2)]).data, plain) and np.array_equal(
        se_shared_forward(desc, (w1, w2), 1).data, plain
    )
    results.append(CheckResult(name="se_k1", module="attention", op="se_deep_forward/se_shared_forward", passed=same))

    kernel = _t(rng, 3)
    same = np.array_equal(eca_shared_forward(desc, kernel, 1).data, eca_forward(desc, kernel).data)
    results.append(CheckResult(name="eca_k1", module="attention", op="eca_shared_forward", passed=same))

    block = PreActBottleneck(BlockSpec(in_channels=8, bottleneck_channels=2, out_channels=8), rng)
    block.eval()
    x = _t(rng, 2, 8, 4, 4)
    shortcut, h = block.residual(x)
    same = np.array_equal(block(x).data, (shortcut + h).data)
    results.append(CheckResult(name="none_block", module="backbone", op="block_forward", passed=same))
    return results


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def sharing_identity(k: int, seed: int = 0) -> CheckResult:
    """
    Shared-parameter gradients equal the summed per-step gradients of an
    unrolled copy with tied initial values (ras and se_shared).
    """
    rng = np.random.default_rng(seed)
    c = 8
    desc = _t(rng, 6, c)
    projection = rng.standard_normal((6, c))

    def loss_of(v: Tensor) -> Tensor:
        return (v * Tensor(projection)).sum()

    cfg = AttentionConfig(kind=AttentionKind.RAS, implicit_depth=k, gamma_init=0.9, beta_init=0.1)
    params = RasParams(c, cfg)
    for state in params.bn_states:
        state.gamma.data = rng.uniform(0.5, 1.5, c)
    with GradTape() as tape:
        backward(loss_of(ras_forward(desc, params, cfg)), tape)

    gammas = [Tensor(params.gamma.data.copy(), requires_grad=True) for _ in range(k)]
    betas = [Tensor(params.beta.data.copy(), requires_grad=True) for _ in range(k)]
    with GradTape() as tape:
        g = desc
        for step in range(1, k + 1):
            if step > 1:
                g = connect(g, cfg.connection, params.bn_states, step - 1)
            g = F.scale_shift(g, gammas[step - 1], betas[step - 1])
        backward(loss_of(F.sigmoid(g)), tape)
    err = max(
        _rel(params.gamma.grad, sum(t.grad for t in gammas)),
        _rel(params.beta.grad, sum(t.grad for t in betas)),
    )

    w1 = Tensor(rng.standard_normal((c, 2)), requires_grad=True)
    w2 = Tensor(rng.standard_normal((2, c)), requires_grad=True)
    with GradTape() as tape:
        backward(loss_of(se_shared_forward(desc, (w1, w2), k)), tape)
    pairs = [(Tensor(w1.data.copy(), requires_grad=True), Tensor(w2.data.copy(), requires_grad=True)) for _ in range(k)]
    with GradTape() as tape:
        backward(loss_of(se_deep_forward(desc, pairs)), tape)
    err = max(
        err,
        _rel(w1.grad, sum(p[0].grad for p in pairs)),
        _rel(w2.grad, sum(p[1].grad for p in pairs)),
    )
    return CheckResult(
        name=f"weight_sharing_k{k}",
        module="attention",
        op="ras_forward/se_shared_forward",
        passed=err < SHARING_TOLERANCE,
        max_rel_error=err,
    )


def _micro(attention: AttentionConfig) -> ModelSpec:
    return ModelSpec.micro(blocks_per_stage=2, stage_widths=(4, 8, 16), attention=attention)


def parameter_laws(seed: int = 0) -> List[CheckResult]:
    """count(model with attention) - count(model without) equals the closed form, exactly."""
    base = count_params(build_model(_micro(AttentionConfig()), seed)).total
    configs = [AttentionConfig(kind=AttentionKind.SE), AttentionConfig(kind=AttentionKind.ECA),
               AttentionConfig(kind=AttentionKind.ECA, eca_kernel=5)]
    for k in (1, 2, 3):
        for bn_mode in BNMode:
            configs.append(AttentionConfig(kind=AttentionKind.RAS, implicit_depth=k, bn_mode=bn_mode))
            configs.append(AttentionConfig(kind=AttentionKind.ECA_SHARED, implicit_depth=k, bn_mode=bn_mode))
            configs.append(AttentionConfig(kind=AttentionKind.SE_SHARED, implicit_depth=k, bn_mode=bn_mode, connect_se=True))
        configs.append(AttentionConfig(kind=AttentionKind.SE_DEEP, implicit_depth=k))
        configs.append(AttentionConfig(kind=AttentionKind.RAS, implicit_depth=k, connection=Connection.TANH))

    results = []
    for cfg in configs:
        spec = _micro(cfg)
        delta = count_params(build_model(spec, seed)).total - base
        formula = attention_formula_total(spec)
        results.append(CheckResult(
            name=f"params_{cfg.label()}",
            module="analysis",
            op="count_params",
            passed=delta == formula,
            detail="" if delta == formula else f"counted {delta}, formula {formula}",
        ))
    return results


def cost_law() -> CheckResult:
    """RAS(k=2) per-block attention multiply-adds stay below SE(r=16)."""
    failures = []
    for c in (64, 128, 256):
        ras = sum(make_attention(AttentionConfig(kind=AttentionKind.RAS, implicit_depth=2), c).cost_terms().values())
        se = sum(make_attention(AttentionConfig(kind=AttentionKind.SE, reduction=16), c).cost_terms().values())
        if not ras < se:
            failures.append(f"C={c}: ras {ras} >= se {se}")
    return CheckResult(name="cost_ras_vs_se", module="analysis", op="estimate_flops", passed=not failures, detail="; ".join(failures))


# Runner

def _guard(name: str, module: str, op: str, fn: Callable[[], List[CheckResult]]) -> List[CheckResult]:
    try:
        return fn()
    except (RasnetError, FloatingPointError, ValueError) as exc:
        return [CheckResult(name=name, module=module, op=op, passed=False, detail=f"{type(exc).__name__}: {exc}")]


def _grad_result(name: str, module: str, check: Callable[[int], GradcheckResult], seeds: Sequence[int]) -> List[CheckResult]:
    worst = _worst([check(seed) for seed in seeds])
    detail = f"{worst.checked} coords, {worst.skipped} kinks"
    return [CheckResult(name=f"grad_{name}", module=module, op=name, passed=worst.passed, detail=detail,
                        max_rel_error=worst.max_rel_error)]


def run_selftest(seeds: int = 3, only: Optional[Sequence[str]] = None) -> SelftestSummary:
    """Run the whole suite at float64; ``only`` restricts gradient checks by op name."""
    seed_list = list(range(seeds))
    checks: List[CheckResult] = []
    with precision(np.float64):
        for name, (module, check) in GRAD_CHECKS.items():
            if only is not None and name not in only:
                continue
            checks.extend(_guard(f"grad_{name}", module, name, lambda: _grad_result(name, module, check, seed_list)))
        if only is None:
            checks.extend(_guard("degeneracy", "attention", "degeneracy", degeneracy_identities))
            for k in (2, 3, 4):
                checks.extend(_guard(f"weight_sharing_k{k}", "attention", "ras_forward", lambda: [sharing_identity(k)]))
            checks.extend(_guard("params", "analysis", "count_params", parameter_laws))
            checks.extend(_guard("cost", "analysis", "estimate_flops", lambda: [cost_law()]))

    summary = SelftestSummary(passed=all(c.passed for c in checks), checks=checks)
    audit = get_audit_logger()
    for c in checks:
        if not c.passed:
            logger.error("selftest failure in %s/%s: %s", c.module, c.op, c.detail)
        if audit:
            audit.log_run_event(EventType.SELFTEST_CHECK, f"{c.name}: {'pass' if c.passed else 'fail'}",
                                LogLevel.INFO if c.passed else LogLevel.ERROR, "selftest", c.model_dump(mode="json"))
    return summary
