"""
SGD training loop: momentum with coupled weight decay, a milestone
learning-rate schedule, per-epoch history and top-1 evaluation.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import functional as F
from .audit_logger import EventType, LogLevel, get_audit_logger
from .checkpoint import save_checkpoint
from .data import DatasetMeta, Example, batches
from .errors import ContractError, NonFiniteError, TrainingDivergedError
from .modules import Module
from .tensor import GradTape, Tensor, backward

logger = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = ("gamma", "beta")


class TrainConfig(BaseModel):
    """Optimizer and schedule settings; defaults follow the 164-epoch CIFAR recipe."""

    epochs: int = Field(default=164, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.1, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    milestones: List[int] = Field(default_factory=lambda: [81, 122])
    drop_factor: float = Field(default=0.1, gt=0.0, le=1.0)
    seed: int = 0
    decay_all: bool = False
    augment: bool = True

    @model_validator(mode="after")
    def _milestones(self):
        m = self.milestones
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {m}")
        if m and (m[0] < 1 or m[-1] >= self.epochs):
            raise ValueError(f"milestones must lie in [1, epochs), got {m} for {self.epochs} epochs")
        return self


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers keyed by parameter name."""
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


class HistoryRecord(BaseModel):
    """One epoch of training, persisted as a line of history.jsonl."""
    epoch: int
    train_loss: float
    train_top1: float
    eval_top1: Optional[float] = None
    lr: float
    wall_time: float


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: lr x drop_factor^(milestones passed)."""
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr * cfg.drop_factor ** passed


def decay_partition(named_params: Sequence[Tuple[str, Tensor]], decay_all: bool = False) -> Tuple[Set[str], Set[str]]:
    """Split parameter names into (decayed, exempt); scale/shift gamma and beta are exempt."""
    decayed, exempt = set(), set()
    for name, _ in named_params:
        if not decay_all and name.rsplit(".", 1)[-1] in NO_DECAY_SUFFIXES:
            exempt.add(name)
        else:
            decayed.add(name)
    return decayed, exempt


def sgd_step(
    params: Sequence[Tuple[str, Tensor]],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
    decay_mask: Optional[Set[str]] = None,
) -> OptimizerState:
    """
    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.

    ``decay_mask`` names the parameters that receive weight decay (all when None).
    Parameters without a gradient are left untouched.
    """
    for name, p in params:
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {grad.shape} != parameter shape {p.shape}")
        d_p = grad
        if weight_decay and (decay_mask is None or name in decay_mask):
            d_p = d_p + weight_decay * p.data
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(p.data)
        elif velocity.shape != p.shape:
            raise ContractError(f"{name}: velocity shape {velocity.shape} != parameter shape {p.shape}")
        velocity = momentum * velocity + d_p
        state.velocity[name] = velocity.astype(p.dtype)
        p.data = (p.data - lr * velocity).astype(p.dtype)
    state.steps += 1
    return state


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(model: Module, data: Sequence[Example], batch_size: int = 128, meta: Optional[DatasetMeta] = None) -> float:
    """Top-1 accuracy in eval mode (batch-norm running statistics)."""
    was_training = model.training
    model.eval()
    correct = 0
    try:
        for images, labels in batches(data, batch_size, shuffle_seed=None, meta=meta, dtype=_model_dtype(model)):
            correct += int((predict(model(images).data) == labels).sum())
    finally:
        model.train(was_training)
    return correct / len(data)


def _model_dtype(model: Module):
    params = model.parameters()
    return params[0].dtype if params else None


def _diverged(epoch: int, batch: int, lr: float, loss: Optional[float], op_name: str) -> TrainingDivergedError:
    error = TrainingDivergedError(epoch, batch, lr, loss)
    logger.error("%s (first non-finite op: %s)", error, op_name)
    audit = get_audit_logger()
    if audit:
        audit.log_run_event(EventType.TRAINING_DIVERGED, str(error), LogLevel.ERROR, "training",
                            {"epoch": epoch, "batch": batch, "lr": lr, "op": op_name})
    return error


def _append_history(path: Path, record: HistoryRecord):
    with open(path, "a") as fh:
        fh.write(record.model_dump_json() + "\n")


def fit(
    model: Module,
    train_data: Sequence[Example],
    eval_data: Optional[Sequence[Example]],
    cfg: TrainConfig,
    meta: Optional[DatasetMeta] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[HistoryRecord]:
    """
    Train with mean softmax cross-entropy and return one HistoryRecord per epoch.

    When ``out_dir`` is given the history is appended to ``history.jsonl`` as it
    is produced and the final weights are written to ``model.rasnn``.
    """
    audit = get_audit_logger()
    named = model.named_parameters()
    decayed, exempt = decay_partition(named, cfg.decay_all)
    logger.info("training %d parameters (%d exempt from weight decay)", len(named), len(exempt))
    state = OptimizerState()
    augment_rng = np.random.default_rng([cfg.seed, 1]) if cfg.augment else None
    dtype = _model_dtype(model)

    history_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        history_path = out_dir / "history.jsonl"
        history_path.write_text("")

    history: List[HistoryRecord] = []
    start = time.perf_counter()
    previous_lr = None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        if previous_lr is not None and lr != previous_lr:
            logger.info("epoch %d: learning rate %.4g -> %.4g", epoch, previous_lr, lr)
            if audit:
                audit.log_run_event(EventType.LR_DROP, f"lr {previous_lr:.4g} -> {lr:.4g}", component="training", metadata={"epoch": epoch})
        previous_lr = lr

        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        stream = batches(train_data, cfg.batch_size, cfg.seed, meta=meta, epoch=epoch, augment_rng=augment_rng, dtype=dtype)
        for batch_index, (images, labels) in enumerate(stream):
            # train-mode batch norm cannot normalize a single example
            if len(labels) < 2:
                logger.debug("epoch %d: skipping trailing batch of one", epoch)
                continue
            try:
                with GradTape() as tape:
                    logits = model(images)
                    loss = F.cross_entropy(logits, labels)
                    backward(loss, tape)
            except NonFiniteError as exc:
                raise _diverged(epoch, batch_index, lr, None, exc.op_name) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise _diverged(epoch, batch_index, lr, value, "cross_entropy")

            grads = {name: p.grad for name, p in named if p.grad is not None}
            sgd_step(named, grads, state, lr, cfg.momentum, cfg.weight_decay, decayed)
            model.zero_grad()

            loss_sum += value * len(labels)
            correct += int((predict(logits.data) == labels).sum())
            seen += len(labels)

        eval_top1 = evaluate(model, eval_data, cfg.batch_size, meta) if eval_data else None
        record = HistoryRecord(
            epoch=epoch,
            train_loss=loss_sum / max(seen, 1),
            train_top1=correct / max(seen, 1),
            eval_top1=eval_top1,
            lr=lr,
            wall_time=time.perf_counter() - start,
        )
        history.append(record)
        if history_path is not None:
            _append_history(history_path, record)
        logger.info(
            "epoch %d/%d loss %.4f train %.4f eval %s lr %.4g",
            epoch + 1, cfg.epochs, record.train_loss, record.train_top1,
            f"{eval_top1:.4f}" if eval_top1 is not None else "-", lr,
        )
        if audit:
            audit.log_epoch(epoch, record.train_loss, eval_top1 if eval_top1 is not None else record.train_top1, lr,
                            metadata={"train_top1": record.train_top1, "wall_time": record.wall_time})

    if out_dir is not None:
        path = save_checkpoint(out_dir / "model.rasnn", model.state_dict())
        if audit:
            audit.log_run_event(EventType.CHECKPOINT_WRITTEN, f"checkpoint written to {path}", LogLevel.INFO, "training",
                                metadata={"path": str(path)})
    return history
