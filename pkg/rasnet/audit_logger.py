"""
Structured run logging for rasnet experiments.
Every record is one JSON object per line, on the console and in rotating log files.
"""

import json
import logging
import logging.handlers
import sys
import uuid
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field


class LogLevel(str, Enum):
    """Log levels for different types of events."""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class EventType(str, Enum):
    """Types of events that can be logged."""
    # Run lifecycle
    RUN_START = "run_start"
    RUN_END = "run_end"
    CONFIG_RESOLVED = "config_resolved"
    RUN_ERROR = "run_error"

    # Training
    EPOCH_END = "epoch_end"
    LR_DROP = "lr_drop"
    CHECKPOINT_WRITTEN = "checkpoint_written"
    TRAINING_DIVERGED = "training_diverged"

    # Analysis
    PARAM_COUNT = "param_count"
    FLOP_ESTIMATE = "flop_estimate"
    BENCHMARK = "benchmark"
    ABLATION_ROW = "ablation_row"

    # Verification
    SELFTEST_CHECK = "selftest_check"


class RunLogEntry(BaseModel):
    """Structured run log entry."""
    timestamp: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    event_id: str = Field(default_factory=lambda: str(uuid.uuid4()))
    event_type: EventType
    level: LogLevel
    message: str
    component: str  # "cli", "training", "analysis", "selftest", ...
    session_id: Optional[str] = None

    # Training fields
    epoch: Optional[int] = None
    loss: Optional[float] = None
    accuracy: Optional[float] = None
    lr: Optional[float] = None

    # Metric fields
    metric_name: Optional[str] = None
    value: Optional[float] = None
    unit: Optional[str] = None

    metadata: Dict[str, Any] = Field(default_factory=dict)


class JSONFormatter(logging.Formatter):
    """Formats log records as single-line JSON."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }

        if hasattr(record, "run_data"):
            log_entry.update(record.run_data)

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_entry, default=str, ensure_ascii=False)


class AuditLogger:
    """
    Run logger for training, analysis and selftest events.
    Writes JSON lines to stderr and to run/metrics/errors log files.
    """

    def __init__(
        self,
        log_dir: str = "logs",
        session_id: Optional[str] = None,
        max_file_size: int = 10 * 1024 * 1024,
        backup_count: int = 5,
        console_level: LogLevel = LogLevel.INFO,
        console: bool = True,
    ):
        self.log_dir = Path(log_dir)
        self.session_id = session_id or str(uuid.uuid4())
        self.max_file_size = max_file_size
        self.backup_count = backup_count

        self.log_dir.mkdir(parents=True, exist_ok=True)
        self._setup_loggers(console_level, console)

        self.log_run_event(
            EventType.RUN_START,
            "Run logging initialized",
            metadata={"session_id": self.session_id, "log_dir": str(self.log_dir)},
        )

    def _setup_loggers(self, console_level: LogLevel, console: bool):
        # Library modules log under "rasnet.*" and propagate into these handlers too
        self.logger = logging.getLogger("rasnet")
        self.logger.setLevel(logging.DEBUG)
        self.logger.handlers.clear()

        formatter = JSONFormatter()

        if console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(getattr(logging, console_level.value))
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

        handlers_config = [
            ("run.log", logging.DEBUG),
            ("metrics.log", logging.INFO),
            ("errors.log", logging.ERROR),
        ]
        for filename, level in handlers_config:
            handler = logging.handlers.RotatingFileHandler(
                self.log_dir / filename,
                maxBytes=self.max_file_size,
                backupCount=self.backup_count,
                encoding="utf-8",
            )
            handler.setLevel(level)
            handler.setFormatter(formatter)
            self.logger.addHandler(handler)

    def _log_entry(self, entry: RunLogEntry):
        if not entry.session_id:
            entry.session_id = self.session_id
        run_data = entry.model_dump(exclude_none=True, mode="json")
        self.logger.log(getattr(logging, entry.level.value), entry.message, extra={"run_data": run_data})

    def log_run_event(
        self,
        event_type: EventType,
        message: str,
        level: LogLevel = LogLevel.INFO,
        component: str = "cli",
        metadata: Optional[Dict[str, Any]] = None,
    ):
        """Log a lifecycle event."""
        self._log_entry(RunLogEntry(
            event_type=event_type,
            level=level,
            message=message,
            component=component,
            metadata=metadata or {},
        ))

    def log_epoch(self, epoch: int, loss: float, accuracy: Optional[float], lr: float, metadata: Optional[Dict[str, Any]] = None):
        """Log the end of a training epoch."""
        acc_text = f"{accuracy:.4f}" if accuracy is not None else "n/a"
        self._log_entry(RunLogEntry(
            event_type=EventType.EPOCH_END,
            level=LogLevel.INFO,
            message=f"Epoch {epoch}: loss {loss:.4f}, top-1 {acc_text}, lr {lr:g}",
            component="training",
            epoch=epoch,
            loss=loss,
            accuracy=accuracy,
            lr=lr,
            metadata=metadata or {},
        ))

    def log_metric(
        self,
        event_type: EventType,
        metric_name: str,
        value: float,
        unit: str,
        component: str = "analysis",
        metadata: Optional[Dict[str, Any]] = None,
    ):
        """Log a measured or computed quantity."""
        self._log_entry(RunLogEntry(
            event_type=event_type,
            level=LogLevel.INFO,
            message=f"{metric_name} = {value} {unit}",
            component=component,
            metric_name=metric_name,
            value=value,
            unit=unit,
            metadata=metadata or {},
        ))

    def log_error(self, message: str, component: str, error: Optional[Exception] = None, metadata: Optional[Dict[str, Any]] = None):
        """Log an error event."""
        error_metadata = dict(metadata or {})
        if error is not None:
            error_metadata.update({"error_type": type(error).__name__, "error_message": str(error)})
        self._log_entry(RunLogEntry(
            event_type=EventType.RUN_ERROR,
            level=LogLevel.ERROR,
            message=message,
            component=component,
            metadata=error_metadata,
        ))

    def close(self):
        """Close the logger and its handlers."""
        self.log_run_event(EventType.RUN_END, "Run logging shutting down")
        for handler in self.logger.handlers:
            handler.close()
        self.logger.handlers.clear()


_audit_logger: Optional[AuditLogger] = None


def get_audit_logger() -> Optional[AuditLogger]:
    """Get the global run logger, or None when running as a library."""
    return _audit_logger


def initialize_audit_logger(log_dir: str = "logs", session_id: Optional[str] = None, **kwargs) -> AuditLogger:
    """Initialize the global run logger."""
    global _audit_logger
    if _audit_logger is not None:
        _audit_logger.close()
    _audit_logger = AuditLogger(log_dir=log_dir, session_id=session_id, **kwargs)
    return _audit_logger


def close_audit_logger():
    """Close the global run logger."""
    global _audit_logger
    if _audit_logger:
        _audit_logger.close()
        _audit_logger = None
