"""
Command-line entry point.

    python -m rasnet {train,eval,count,flops,bench,ablate,selftest} [flags]

Configuration precedence: command-line flag > --config file > RASNET_*
environment defaults > built-in defaults. The resolved configuration is
written to <out>/resolved_config.txt and can be passed back with --config.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .analysis import ablation_sweep, analyze, bench_compare, compare_models, estimate_flops, with_axis, write_reports
from .attention import AttentionConfig, AttentionKind, BNMode, Connection
from .audit_logger import EventType, LogLevel, close_audit_logger, get_audit_logger, initialize_audit_logger
from .backbone import ModelSpec, build_model
from .checkpoint import load_checkpoint
from .config import settings, validate_config
from .data import DatasetMeta, compute_meta, load_cifar, synth_dataset
from .errors import ConfigurationError, RasnetError, UsageError
from .selftest import run_selftest
from .training import TrainConfig, evaluate, fit

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "eval", "count", "flops", "bench", "ablate", "selftest")
LIST_FIELDS = ("milestones", "stage_widths", "attention_list", "values")
MODEL_DEFAULTS = {
    "resnet164": (18, (16, 32, 64)),
    "resnet83": (9, (16, 32, 64)),
    "micro": (2, (8, 16, 32)),
}
DATASET_CLASSES = {"cifar10": 10, "cifar100": 100}


def default_milestones(epochs: int) -> List[int]:
    """81 and 122 at 164 epochs, scaled proportionally for shorter runs."""
    scaled = sorted({int(epochs * 81 / 164), int(epochs * 122 / 164)})
    return [m for m in scaled if 1 <= m < epochs]


class RunConfig(BaseModel):
    """Every setting of one invocation; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    subcommand: Literal["train", "eval", "count", "flops", "bench", "ablate", "selftest"] = "count"

    # Model
    model: Literal["resnet164", "resnet83", "micro"] = "resnet164"
    blocks_per_stage: Optional[int] = Field(default=None, ge=1)
    stage_widths: Optional[List[int]] = None
    num_classes: Optional[int] = Field(default=None, ge=1)
    resolution: Optional[int] = Field(default=None, ge=1)

    # Attention
    attention: AttentionKind = AttentionKind.NONE
    attention_list: Optional[List[AttentionKind]] = None
    depth_k: int = Field(default=2, ge=1)
    bn_mode: BNMode = BNMode.NON_SHARED
    connection: Connection = Connection.BN
    reduction: int = Field(default=16, ge=1)
    eca_kernel: Union[int, Literal["adaptive"]] = "adaptive"
    connect_se: bool = False
    gamma_init: float = 1.0
    beta_init: float = 0.0

    # Training
    epochs: int = Field(default=164, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Optional[List[int]] = None
    drop_factor: float = 0.1
    decay_all: bool = False
    augment: bool = True

    # Data
    dataset: Literal["cifar10", "cifar100", "synth"] = "cifar10"
    data_dir: Path = Field(default_factory=lambda: settings.data_dir)
    synth_count: int = Field(default=256, ge=2)

    # Outputs
    out: Path = Field(default_factory=lambda: settings.out_dir)
    seed: int = 0
    csv: bool = True
    checkpoint: Optional[Path] = None

    # Benchmark
    bench_batch: int = Field(default=128, ge=1)
    warmup: int = Field(default=20, ge=0)
    reps: int = Field(default=100, ge=1)
    runs: int = Field(default=1, ge=1)
    bench_scope: Literal["model", "attention"] = "model"

    # Ablation and selftest
    axis: Optional[Literal["depth", "bn_mode", "connection"]] = None
    values: Optional[List[str]] = None
    budget: int = Field(default=0, ge=0)
    seeds: int = Field(default=3, ge=1)

    @field_validator(*LIST_FIELDS, mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("stage_widths")
    @classmethod
    def _three_stages(cls, value):
        if value is not None and (len(value) != 3 or any(w < 1 for w in value)):
            raise ValueError(f"stage_widths needs three positive widths, got {value}")
        return value

    @model_validator(mode="after")
    def _resolvable(self):
        # surface nested validation errors at parse time
        for kind in self.attention_kinds():
            self.attention_config(kind)
        self.train_config()
        return self

    # Derived configurations

    def attention_kinds(self) -> List[AttentionKind]:
        return list(self.attention_list) if self.attention_list else [self.attention]

    def attention_config(self, kind: Optional[AttentionKind] = None) -> AttentionConfig:
        return AttentionConfig(
            kind=kind or self.attention,
            implicit_depth=self.depth_k,
            bn_mode=self.bn_mode,
            connection=self.connection,
            reduction=self.reduction,
            eca_kernel=self.eca_kernel,
            connect_se=self.connect_se,
            gamma_init=self.gamma_init,
            beta_init=self.beta_init,
        )

    def class_count(self) -> int:
        if self.num_classes is not None:
            return self.num_classes
        return DATASET_CLASSES.get(self.dataset, 2)

    def model_spec(self, kind: Optional[AttentionKind] = None) -> ModelSpec:
        blocks, widths = MODEL_DEFAULTS[self.model]
        side = self.resolution or (16 if self.model == "micro" and self.dataset == "synth" else 32)
        return ModelSpec(
            name=self.model,
            blocks_per_stage=self.blocks_per_stage or blocks,
            stage_widths=tuple(self.stage_widths or widths),
            num_classes=self.class_count(),
            attention=self.attention_config(kind),
            input_resolution=(side, side),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            milestones=self.milestones if self.milestones is not None else default_milestones(self.epochs),
            drop_factor=self.drop_factor,
            seed=self.seed,
            decay_all=self.decay_all,
            augment=self.augment,
        )


# Parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--out", help="output directory for reports, history and checkpoints")
    p.add_argument("--seed", help="random seed (default: 0)")
    p.add_argument("--csv", action="store_true", help="also write CSV reports (default)")
    p.add_argument("--no-csv", dest="csv", action="store_false", help="write JSONL only")

    model = p.add_argument_group("model")
    model.add_argument("--model", help="resnet164 | resnet83 | micro (default: resnet164)")
    model.add_argument("--blocks-per-stage", dest="blocks_per_stage", help="override n in depth 9n+2")
    model.add_argument("--stage-widths", dest="stage_widths", help="three comma-separated bottleneck widths")
    model.add_argument("--num-classes", dest="num_classes", help="default: from --dataset")
    model.add_argument("--resolution", help="input side length (default: 32, 16 for micro on synth)")

    att = p.add_argument_group("attention")
    att.add_argument("--attention", help="none | se | se_deep | se_shared | eca | eca_shared | ras")
    att.add_argument("--attention-list", dest="attention_list", help="comma-separated kinds to compare")
    att.add_argument("--depth-k", dest="depth_k", help="implicit depth k (default: 2)")
    att.add_argument("--bn-mode", dest="bn_mode", help="shared | non_shared (default: non_shared)")
    att.add_argument("--connection", help="bn | relu | tanh | sigmoid | identity (default: bn)")
    att.add_argument("--reduction", help="SE reduction ratio r (default: 16)")
    att.add_argument("--eca-kernel", dest="eca_kernel", help="odd kernel size or 'adaptive' (default)")
    att.add_argument("--connect-se", dest="connect_se", action="store_true", help="join SE recurrence steps with the connection")
    att.add_argument("--gamma-init", dest="gamma_init", help="initial linear-enhancement scale (default: 1.0)")
    att.add_argument("--beta-init", dest="beta_init", help="initial linear-enhancement shift (default: 0.0)")

    train = p.add_argument_group("training")
    train.add_argument("--epochs", help="default: 164")
    train.add_argument("--batch-size", dest="batch_size", help="default: 128")
    train.add_argument("--lr", help="initial learning rate (default: 0.1)")
    train.add_argument("--momentum", help="default: 0.9")
    train.add_argument("--weight-decay", dest="weight_decay", help="default: 1e-4")
    train.add_argument("--milestones", help="comma-separated epochs for lr drops (default: 81,122 scaled)")
    train.add_argument("--drop-factor", dest="drop_factor", help="default: 0.1")
    train.add_argument("--decay-all", dest="decay_all", action="store_true", help="weight-decay gamma/beta too")
    train.add_argument("--no-augment", dest="augment", action="store_false", help="disable crop/flip augmentation")

    data = p.add_argument_group("data")
    data.add_argument("--dataset", help="cifar10 | cifar100 | synth (default: cifar10)")
    data.add_argument("--data-dir", dest="data_dir", help="default: $RASNET_DATA_DIR or ./data")
    data.add_argument("--synth-count", dest="synth_count", help="synthetic training examples (default: 256)")
    data.add_argument("--checkpoint", help="RASNN file for eval (default: <out>/model.rasnn)")

    bench = p.add_argument_group("benchmark")
    bench.add_argument("--bench-batch", dest="bench_batch", help="default: 128")
    bench.add_argument("--warmup", help="untimed batches (default: 20)")
    bench.add_argument("--reps", help="timed batches (default: 100)")
    bench.add_argument("--runs", help="independent benchmark runs (default: 1)")
    bench.add_argument("--bench-scope", dest="bench_scope", help="model | attention (default: model)")

    abl = p.add_argument_group("ablation / selftest")
    abl.add_argument("--axis", help="depth | bn_mode | connection")
    abl.add_argument("--values", help="comma-separated axis values")
    abl.add_argument("--budget", help="training epochs per ablation row (default: 0)")
    abl.add_argument("--seeds", help="gradient-check seeds for selftest (default: 3)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rasnet", description="Recurrent channel attention for pre-activation ResNets")
    parser.add_argument("--version", action="version", version=f"rasnet {__version__}")
    common = _common_flags()
    sub = parser.add_subparsers(dest="subcommand", required=True)
    helps = {
        "train": "train a model and write history + checkpoint",
        "eval": "top-1 accuracy of a checkpoint",
        "count": "exact parameter counts",
        "flops": "analytic multiply-add estimates",
        "bench": "inference throughput (frames/s)",
        "ablate": "sweep implicit depth, BN mode or connection",
        "selftest": "gradient checks and invariant laws",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], argument_default=argparse.SUPPRESS)
    return parser


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Flat key=value lines; '#' starts a comment, dashes in keys become underscores."""
    values: Dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_config(argv: Sequence[str]) -> RunConfig:
    """Resolve argv (and an optional --config file) into a RunConfig; raises UsageError."""
    args = vars(build_parser().parse_args(list(argv)))
    config_path = args.pop("config", None)
    file_values = read_config_file(config_path) if config_path else {}
    if "attention" in args and "attention_list" in args:
        raise UsageError("--attention and --attention-list are mutually exclusive")
    merged: Dict[str, Any] = {**file_values, **args}
    if "attention_list" in args:
        merged.pop("attention", None)
    try:
        cfg = RunConfig(**merged)
    except ValidationError as exc:
        raise UsageError(_describe(exc)) from exc
    _check_subcommand(cfg)
    return cfg


def _describe(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        where = ".".join(str(p) for p in error["loc"]) or "config"
        parts.append(f"{where}: {error['msg']}")
    return "; ".join(parts)


def _check_subcommand(cfg: RunConfig):
    if cfg.subcommand == "ablate":
        if cfg.axis is None or not cfg.values:
            raise UsageError("ablate needs --axis and --values")
        base = cfg.attention_config()
        for value in cfg.values:
            try:
                with_axis(base, cfg.axis, _axis_value(cfg.axis, value))
            except (ConfigurationError, ValueError) as exc:
                raise UsageError(str(exc)) from exc
    if cfg.attention_list and cfg.subcommand in ("train", "eval", "ablate"):
        raise UsageError(f"--attention-list is not supported by {cfg.subcommand}")


def _axis_value(axis: str, value: str):
    if axis == "depth":
        try:
            return int(value)
        except ValueError as exc:
            raise UsageError(f"depth values must be integers, got {value!r}") from exc
    return value


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> Path:
    """Echo the resolved configuration as a --config-compatible key=value file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# rasnet {__version__} resolved configuration"]
    for key, value in cfg.model_dump(mode="json").items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    path = out_dir / "resolved_config.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# Subcommands

def _load_split(cfg: RunConfig, split: str):
    if cfg.dataset == "synth":
        side = cfg.model_spec().input_resolution
        if split == "train":
            return synth_dataset(cfg.class_count(), cfg.synth_count, side, cfg.seed)
        return synth_dataset(cfg.class_count(), max(cfg.class_count(), cfg.synth_count // 4), side, cfg.seed + 1)
    return load_cifar(cfg.data_dir, cfg.dataset, split)


def cmd_train(cfg: RunConfig) -> int:
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    meta = compute_meta(train, cfg.dataset, cfg.class_count())
    (cfg.out / "meta.json").write_text(meta.model_dump_json(indent=2))
    model = build_model(cfg.model_spec(), cfg.seed)
    history = fit(model, train, test, cfg.train_config(), meta=meta, out_dir=cfg.out)
    last = history[-1]
    print(f"epoch {last.epoch + 1}: loss {last.train_loss:.4f}, train top-1 {last.train_top1:.4f}, "
          f"eval top-1 {last.eval_top1:.4f}" if last.eval_top1 is not None else f"epoch {last.epoch + 1}: loss {last.train_loss:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    checkpoint = cfg.checkpoint or cfg.out / "model.rasnn"
    model = build_model(cfg.model_spec(), cfg.seed)
    model.load_state_dict(load_checkpoint(checkpoint))
    meta_path = cfg.out / "meta.json"
    meta = DatasetMeta.model_validate_json(meta_path.read_text()) if meta_path.is_file() else None
    test = _load_split(cfg, "test")
    top1 = evaluate(model, test, cfg.batch_size, meta)
    row = {"checkpoint": str(checkpoint), "dataset": cfg.dataset, "examples": len(test), "top1": top1}
    write_reports([row], cfg.out, "eval", csv=cfg.csv)
    print(f"top-1 {top1:.4f} on {len(test)} {cfg.dataset} examples")
    return 0


def cmd_count(cfg: RunConfig) -> int:
    reports = [analyze(cfg.model_spec(kind), cfg.seed) for kind in cfg.attention_kinds()]
    audit = get_audit_logger()
    for r in reports:
        if audit:
            audit.log_metric(EventType.PARAM_COUNT, f"{r.model_id}/{r.attention} params", r.total_params, "parameters",
                             metadata={"params_millions": r.params_millions, "attention_params": r.attention_params})
    write_reports(reports, cfg.out, "count", csv=cfg.csv)
    frame = pd.DataFrame([
        {"model": r.model_id, "attention": r.attention, "params": r.total_params, "params_M": r.params_millions,
         "attention_params": r.attention_params}
        for r in reports
    ])
    print(frame.to_string(index=False))
    if len(reports) > 1:
        comparison = compare_models(reports)
        write_reports(comparison, cfg.out, "compare", csv=cfg.csv)
        print(comparison[["attention", "param_overhead", "flop_overhead"]].to_string(index=False))
    return 0


def cmd_flops(cfg: RunConfig) -> int:
    rows = []
    for kind in cfg.attention_kinds():
        spec = cfg.model_spec(kind)
        report = estimate_flops(build_model(spec, cfg.seed))
        audit = get_audit_logger()
        if audit:
            audit.log_metric(EventType.FLOP_ESTIMATE, f"{spec.name}/{spec.attention.label()} flops", report.total, report.unit,
                             metadata=report.components)
        rows.append({"model_id": f"{spec.name}/{spec.num_classes}", "attention": spec.attention.label(),
                     "flops_per_image": report.total, "attention_flops": report.attention, "unit": report.unit,
                     **{f"component.{k}": v for k, v in report.components.items()}})
    frame = pd.DataFrame(rows)
    write_reports(frame, cfg.out, "flops", csv=cfg.csv)
    print(frame[["model_id", "attention", "flops_per_image", "attention_flops", "unit"]].to_string(index=False))
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    specs = {spec.attention.label(): spec for spec in map(cfg.model_spec, cfg.attention_kinds())}
    rows = []
    for run in range(cfg.runs):
        models = {label: build_model(spec, cfg.seed) for label, spec in specs.items()}
        results = bench_compare(models, cfg.bench_batch, cfg.warmup, cfg.reps, cfg.seed + run, scope=cfg.bench_scope)
        for label, stats in results.items():
            spec = specs[label]
            rows.append({"run": run, "model_id": f"{spec.name}/{spec.num_classes}", "attention": label,
                         **stats.model_dump(mode="json")})
    frame = pd.DataFrame(rows)
    write_reports(frame, cfg.out, "bench", csv=cfg.csv)
    print(frame[["run", "attention", "fps_median", "fps_min", "fps_max", "batch_size", "reliable"]].to_string(index=False))
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    values = [_axis_value(cfg.axis, v) for v in cfg.values]
    frame = ablation_sweep(cfg.axis, cfg.model_spec(), values, budget=cfg.budget, seed=cfg.seed)
    write_reports(frame, cfg.out, f"ablate_{cfg.axis}", csv=cfg.csv)
    print(frame.to_string(index=False))
    return 0 if bool(frame["smoke_ok"].all()) else 1


def cmd_selftest(cfg: RunConfig) -> int:
    summary = run_selftest(cfg.seeds)
    write_reports(summary.checks, cfg.out, "selftest", csv=cfg.csv)
    print(summary.render())
    return 0 if summary.passed else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count": cmd_count,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"rasnet: error: {exc}", file=sys.stderr)
        return 2

    if not validate_config():
        print("rasnet: error: invalid RASNET_* settings (check RASNET_LOG_LEVEL and RASNET_NUM_THREADS)", file=sys.stderr)
        return 2

    cfg.out.mkdir(parents=True, exist_ok=True)
    audit = initialize_audit_logger(
        log_dir=str(settings.log_dir or cfg.out / "logs"),
        console=settings.console_logging,
        console_level=LogLevel(settings.log_level.upper()),
    )
    try:
        path = write_resolved_config(cfg, cfg.out)
        audit.log_run_event(EventType.CONFIG_RESOLVED, f"{cfg.subcommand} configuration written to {path}",
                            metadata={"subcommand": cfg.subcommand, "seed": cfg.seed})
        return COMMANDS[cfg.subcommand](cfg)
    except RasnetError as exc:
        audit.log_error(f"{cfg.subcommand} failed", "cli", exc)
        print(f"rasnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        audit.log_error(f"{cfg.subcommand} crashed", "cli", exc)
        logger.exception("unexpected failure")
        print(f"rasnet: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        close_audit_logger()


if __name__ == "__main__":
    sys.exit(main())
