"""
Model accounting: exact parameter counts, analytic multiply-add estimates,
wall-clock throughput and ablation sweeps over the recurrence axes.
"""

import logging
import os
import statistics
import tempfile
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from threadpoolctl import threadpool_limits

from . import functional as F
from .attention import AttentionConfig, AttentionKind, attention_param_formula
from .audit_logger import EventType, get_audit_logger
from .backbone import ModelSpec, PreActBottleneck, ResNet, build_model
from .config import settings
from .data import Example, synth_dataset
from .errors import ConfigurationError, RasnetError
from .modules import Conv2d, Module
from .tensor import GradTape, Tensor, backward
from .training import TrainConfig, fit

logger = logging.getLogger(__name__)

FLOP_UNIT = "multiply-adds"
ABLATION_AXES = {"depth": "implicit_depth", "bn_mode": "bn_mode", "connection": "connection"}
BENCH_LOCK = Path(tempfile.gettempdir()) / "rasnet-bench.lock"


class ParamCount(BaseModel):
    """Trainable parameter count split into backbone and attention parts."""
    total: int
    backbone: int
    attention: int
    by_component: Dict[str, int] = Field(default_factory=dict)

    @property
    def millions(self) -> float:
        return round(self.total / 1e6, 2)


class FlopReport(BaseModel):
    """Per-image multiply-adds; ``components`` sums to ``total``."""
    total: int
    components: Dict[str, int]
    resolution: Tuple[int, int]
    unit: str = FLOP_UNIT

    @property
    def attention(self) -> int:
        return sum(v for k, v in self.components.items() if k.startswith("attention."))


class BenchStats(BaseModel):
    """Throughput measured over interleaved timed passes in eval mode; ``scope`` is model or attention."""
    fps: float
    fps_min: float
    fps_median: float
    fps_max: float
    batch_size: int
    warmup: int
    reps: int
    resolution: Tuple[int, int]
    threads: int
    dtype: str
    scope: str = "model"
    reliable: bool = True


class AnalysisReport(BaseModel):
    """One row of a count/flops/bench report."""
    model_id: str
    attention: str
    attention_config: Dict[str, Any]
    total_params: int
    params_millions: float
    attention_params: int
    flops_per_image: int
    flop_unit: str = FLOP_UNIT
    bench: Optional[BenchStats] = None

    @model_validator(mode="after")
    def _rounded(self):
        if self.params_millions != round(self.total_params / 1e6, 2):
            raise ValueError("params_millions must equal round(total_params / 1e6, 2)")
        return self


# Parameters

def _component(name: str) -> str:
    if ".attention." in name:
        return "attention"
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("fc."):
        return "fc"
    if leaf in ("gamma", "beta"):
        return "batch_norm"
    return "conv"


def count_params(model: Module) -> ParamCount:
    """Exact trainable parameter count; batch-norm running statistics are not parameters."""
    by_component: Dict[str, int] = {}
    for name, p in model.named_parameters():
        key = _component(name)
        by_component[key] = by_component.get(key, 0) + int(p.size)
    total = sum(by_component.values())
    attention = by_component.get("attention", 0)
    return ParamCount(total=total, backbone=total - attention, attention=attention, by_component=by_component)


def attention_formula_total(spec: ModelSpec) -> int:
    """Closed-form attention parameter total of a model plan."""
    return sum(attention_param_formula(b.attention, b.out_channels) for stage in spec.block_specs() for b in stage)


# Multiply-adds

def conv_multiply_adds(in_channels: int, out_channels: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    return in_channels * out_channels * kh * kw * h_out * w_out


def _conv_cost(conv: Conv2d, h: int, w: int) -> Tuple[int, int, int]:
    h_out, w_out = conv.output_size(h), conv.output_size(w)
    k = conv.kernel_size
    return conv_multiply_adds(conv.in_channels, conv.out_channels, k, k, h_out, w_out), h_out, w_out


def _add(components: Dict[str, int], key: str, value: int):
    if value:
        components[key] = components.get(key, 0) + int(value)


def _block_cost(block: PreActBottleneck, h: int, w: int, components: Dict[str, int]) -> Tuple[int, int]:
    spec = block.spec
    _add(components, "batch_norm", spec.in_channels * h * w)
    cost, _, _ = _conv_cost(block.conv1, h, w)
    _add(components, "conv", cost)
    _add(components, "batch_norm", spec.bottleneck_channels * h * w)
    cost, h2, w2 = _conv_cost(block.conv2, h, w)
    _add(components, "conv", cost)
    _add(components, "batch_norm", spec.bottleneck_channels * h2 * w2)
    cost, _, _ = _conv_cost(block.conv3, h2, w2)
    _add(components, "conv", cost)
    if block.shortcut is not None:
        cost, _, _ = _conv_cost(block.shortcut, h, w)
        _add(components, "conv", cost)
    if spec.attention.kind != AttentionKind.NONE:
        # pooling plus the per-element rescale
        _add(components, "attention.gate", spec.out_channels * h2 * w2)
        for term, value in block.attention.cost_terms().items():
            _add(components, f"attention.{term}", value)
    return h2, w2


def estimate_flops(model: ResNet, input_resolution: Optional[Tuple[int, int]] = None) -> FlopReport:
    """
    Analytic per-image multiply-adds.

    conv = Cin*Cout*kh*kw*H'*W', FC = Din*Dout, eval-mode batch norm one per
    element; attention transforms contribute their itemized cost terms.
    Independent of parameter values.
    """
    h, w = tuple(input_resolution) if input_resolution is not None else tuple(model.spec.input_resolution)
    if h < 1 or w < 1:
        raise ConfigurationError(f"input resolution must be positive, got {(h, w)}")
    components: Dict[str, int] = {}
    cost, h, w = _conv_cost(model.stem, h, w)
    _add(components, "conv", cost)
    for block in model.blocks():
        h, w = _block_cost(block, h, w, components)
    _add(components, "batch_norm", model.bn_final.num_features * h * w)
    _add(components, "fc", model.fc.in_features * model.fc.out_features)
    resolution = tuple(input_resolution) if input_resolution is not None else tuple(model.spec.input_resolution)
    return FlopReport(total=sum(components.values()), components=components, resolution=resolution)


# Throughput

BENCH_SCOPES = ("model", "attention")


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class _BenchLock:
    """
    Marker file flagging concurrent benchmark runs on one machine.

    The file holds the owner's pid; a lock whose owner has exited is removed
    and taken over.
    """

    def __init__(self, path: Path = BENCH_LOCK):
        self.path = path
        self.owned = False

    def _acquire(self) -> bool:
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return True

    def _clear_stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except FileNotFoundError:
            return True
        except (OSError, ValueError):
            # unreadable or still being written
            return False
        if _pid_alive(pid):
            return False
        logger.info("removing stale benchmark lock %s left by pid %d", self.path, pid)
        self.path.unlink(missing_ok=True)
        return True

    def __enter__(self) -> "_BenchLock":
        self.owned = self._acquire() or (self._clear_stale() and self._acquire())
        if not self.owned:
            logger.warning("another benchmark holds %s; results flagged unreliable", self.path)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.owned:
            self.path.unlink(missing_ok=True)


def _check_protocol(batch_size: int, warmup: int, reps: int):
    if batch_size < 1 or reps < 1 or warmup < 0:
        raise ConfigurationError(f"invalid benchmark protocol: batch {batch_size}, warmup {warmup}, reps {reps}")


def time_interleaved(
    runners: Dict[str, Callable[[], object]],
    warmup: int,
    reps: int,
    lock_path: Optional[Path] = None,
) -> Tuple[Dict[str, List[float]], bool]:
    """
    Per-rep wall times of every runner, measured round-robin.

    Each rep runs every runner once, rotating the starting runner so that no
    runner always goes first. BLAS pools are pinned to ``settings.num_threads``
    for the warmup and timed loops. Returns the times and whether this run
    held the benchmark lock.
    """
    names = list(runners)
    times: Dict[str, List[float]] = {name: [] for name in names}
    with _BenchLock(lock_path or BENCH_LOCK) as lock, threadpool_limits(limits=settings.num_threads):
        for _ in range(warmup):
            for name in names:
                runners[name]()
        for rep in range(reps):
            shift = rep % len(names)
            for name in names[shift:] + names[:shift]:
                start = time.perf_counter()
                runners[name]()
                times[name].append(time.perf_counter() - start)
    return times, lock.owned


def _stats(times: List[float], model: ResNet, batch_size: int, warmup: int, reps: int, scope: str,
           reliable: bool) -> BenchStats:
    per_rep = [batch_size / t for t in times]
    return BenchStats(
        fps=reps * batch_size / sum(times),
        fps_min=min(per_rep),
        fps_median=statistics.median(per_rep),
        fps_max=max(per_rep),
        batch_size=batch_size,
        warmup=warmup,
        reps=reps,
        resolution=tuple(model.spec.input_resolution),
        threads=settings.num_threads,
        dtype=str(model.fc.weight.dtype),
        scope=scope,
        reliable=reliable,
    )


def _log_bench(name: str, stats: BenchStats):
    audit = get_audit_logger()
    if audit:
        audit.log_metric(EventType.BENCHMARK, f"{name} {stats.scope} fps", stats.fps_median, "frames/s",
                         metadata=stats.model_dump(mode="json"))


def _model_runner(model: ResNet, batch_size: int, seed: int) -> Callable[[], object]:
    h, w = model.spec.input_resolution
    x = Tensor(np.random.default_rng(seed).standard_normal((batch_size, 3, h, w)), dtype=model.fc.weight.dtype)
    model.eval()
    return lambda: model(x)


def _attention_runner(model: ResNet, batch_size: int, seed: int) -> Callable[[], object]:
    rng = np.random.default_rng(seed)
    dtype = model.fc.weight.dtype
    calls = [(block.attention, Tensor(rng.standard_normal((batch_size, block.attention.channels)), dtype=dtype))
             for block in model.blocks()]
    model.eval()

    def run():
        for attention, descriptor in calls:
            attention(descriptor)

    return run


def bench_compare(
    models: Dict[str, ResNet],
    batch_size: int = 128,
    warmup: int = 20,
    reps: int = 100,
    seed: int = 0,
    lock_path: Optional[Path] = None,
    scope: str = "model",
) -> Dict[str, BenchStats]:
    """
    Throughput of several models timed in interleaved eval-mode passes.

    ``scope="model"`` times full forward passes. ``scope="attention"`` times
    only the attention transforms of every block on [batch, C] descriptors,
    the part of the network where attention kinds differ.
    """
    _check_protocol(batch_size, warmup, reps)
    if not models:
        raise ConfigurationError("bench_compare needs at least one model")
    if scope not in BENCH_SCOPES:
        raise ConfigurationError(f"unknown benchmark scope {scope!r}; expected one of {list(BENCH_SCOPES)}")
    make_runner = _model_runner if scope == "model" else _attention_runner
    runners = {name: make_runner(model, batch_size, seed) for name, model in models.items()}
    times, reliable = time_interleaved(runners, warmup, reps, lock_path)
    results = {}
    for name, model in models.items():
        results[name] = _stats(times[name], model, batch_size, warmup, reps, scope, reliable)
        _log_bench(name, results[name])
    return results


def bench_fps(
    model: ResNet,
    batch_size: int = 128,
    warmup: int = 20,
    reps: int = 100,
    seed: int = 0,
    lock_path: Optional[Path] = None,
) -> BenchStats:
    """
    Frames per second of eval-mode forward passes.

    fps = reps * batch_size / total timed wall time; min/median/max are per-rep.
    """
    name = f"{model.spec.name}/{model.spec.attention.label()}"
    return bench_compare({name: model}, batch_size, warmup, reps, seed, lock_path)[name]


# Reports

def analyze(
    spec: ModelSpec,
    seed: int = 0,
    bench: bool = False,
    batch_size: int = 128,
    warmup: int = 20,
    reps: int = 100,
) -> AnalysisReport:
    """Build ``spec`` and report counts, multiply-adds and optionally throughput."""
    model = build_model(spec, seed)
    counts = count_params(model)
    flops = estimate_flops(model)
    return AnalysisReport(
        model_id=f"{spec.name}/{spec.num_classes}",
        attention=spec.attention.label(),
        attention_config=spec.attention.model_dump(mode="json"),
        total_params=counts.total,
        params_millions=counts.millions,
        attention_params=counts.attention,
        flops_per_image=flops.total,
        bench=bench_fps(model, batch_size, warmup, reps, seed) if bench else None,
    )


def compare_models(
    reports: Sequence[AnalysisReport],
    baseline: Optional[AnalysisReport] = None,
    accuracies: Optional[Dict[str, float]] = None,
) -> pd.DataFrame:
    """
    Overheads of each report relative to a baseline.

    The baseline defaults to the first report without attention, else the first
    report. ``accuracies`` maps ``model_id|attention`` to a top-1 value.
    """
    if not reports:
        raise ConfigurationError("compare_models needs at least one report")
    if baseline is None:
        baseline = next((r for r in reports if r.attention == "none"), reports[0])
    rows = []
    for r in reports:
        rows.append({
            "model_id": r.model_id,
            "attention": r.attention,
            "total_params": r.total_params,
            "params_millions": r.params_millions,
            "param_overhead": (r.total_params - baseline.total_params) / baseline.total_params,
            "flops_per_image": r.flops_per_image,
            "flop_overhead": (r.flops_per_image - baseline.flops_per_image) / baseline.flops_per_image,
            "fps_median": r.bench.fps_median if r.bench else None,
            "top1": (accuracies or {}).get(f"{r.model_id}|{r.attention}"),
        })
    return pd.DataFrame(rows)


def _flatten(row: Union[BaseModel, Dict[str, Any]]) -> Dict[str, Any]:
    data = row.model_dump(mode="json") if isinstance(row, BaseModel) else dict(row)
    return pd.json_normalize(data, sep=".").iloc[0].to_dict()


def write_reports(
    rows: Union[Sequence[Union[BaseModel, Dict[str, Any]]], pd.DataFrame],
    out_dir: Union[str, Path],
    stem: str,
    csv: bool = True,
) -> List[Path]:
    """Write rows as ``<stem>.jsonl`` (one object per line) and optionally ``<stem>.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(rows, pd.DataFrame):
        frame = rows
    else:
        frame = pd.DataFrame([_flatten(r) for r in rows])
    paths = [out_dir / f"{stem}.jsonl"]
    frame.to_json(paths[0], orient="records", lines=True)
    if csv:
        paths.append(out_dir / f"{stem}.csv")
        frame.to_csv(paths[1], index=False)
    return paths


# Ablations

def with_axis(base: AttentionConfig, axis: str, value) -> AttentionConfig:
    field = ABLATION_AXES.get(axis)
    if field is None:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    try:
        return AttentionConfig(**{**base.model_dump(), field: value})
    except ValueError as exc:
        raise ConfigurationError(f"invalid {axis} value {value!r}: {exc}") from exc


def smoke_check(model: ResNet, seed: int = 0) -> bool:
    """One train-mode forward/backward on two random images; every parameter must get a finite gradient."""
    h, w = model.spec.input_resolution
    dtype = model.fc.weight.dtype
    x = Tensor(np.random.default_rng(seed).standard_normal((2, 3, h, w)), dtype=dtype)
    labels = np.arange(2) % model.spec.num_classes
    model.train()
    model.zero_grad()
    try:
        with GradTape() as tape:
            loss = F.cross_entropy(model(x), labels)
            backward(loss, tape)
    except RasnetError as exc:
        logger.error("smoke check failed: %s", exc)
        return False
    ok = all(p.grad is not None and np.isfinite(p.grad).all() for p in model.parameters())
    model.zero_grad()
    return ok


def ablation_sweep(
    axis: str,
    base_spec: ModelSpec,
    values: Sequence,
    budget: int = 0,
    train_data: Optional[Sequence[Example]] = None,
    bench: bool = False,
    bench_reps: int = 10,
    seed: int = 0,
    train_cfg: Optional[TrainConfig] = None,
) -> pd.DataFrame:
    """
    One row per axis value: parameter counts, multiply-adds, a forward/backward
    smoke check and, when ``budget`` > 0, the result of a ``budget``-epoch run.
    """
    if not values:
        raise ConfigurationError("ablation needs at least one value")
    if budget > 0 and train_data is None:
        h, w = base_spec.input_resolution
        train_data = synth_dataset(base_spec.num_classes, 16 * base_spec.num_classes, (h, w), seed)

    audit = get_audit_logger()
    rows = []
    for value in values:
        attention = with_axis(base_spec.attention, axis, value)
        spec = base_spec.model_copy(update={"attention": attention})
        model = build_model(spec, seed)
        counts = count_params(model)
        row = {
            "axis": axis,
            "value": getattr(value, "value", value),
            "attention": attention.label(),
            "total_params": counts.total,
            "attention_params": counts.attention,
            "formula_params": attention_formula_total(spec),
            "flops_per_image": estimate_flops(model).total,
            "smoke_ok": smoke_check(model, seed),
        }
        if bench:
            row["fps_median"] = bench_fps(model, batch_size=16, warmup=20, reps=bench_reps, seed=seed).fps_median
        if budget > 0:
            cfg = train_cfg or TrainConfig(epochs=budget, batch_size=32, lr=0.05, milestones=[], seed=seed, augment=False)
            history = fit(model, train_data, None, cfg.model_copy(update={"epochs": budget}))
            row["train_loss"] = history[-1].train_loss
            row["train_top1"] = history[-1].train_top1
        rows.append(row)
        logger.info("ablation %s=%s: %d params", axis, row["value"], counts.total)
        if audit:
            audit.log_run_event(EventType.ABLATION_ROW, f"{axis}={row['value']}", component="analysis", metadata=row)
    return pd.DataFrame(rows)
