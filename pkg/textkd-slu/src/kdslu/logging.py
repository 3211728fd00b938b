"""Event and metric logging for textkd-slu.

Logs events to structured JSONL files in <run_dir>/logs/: events.jsonl for
everything, errors.jsonl for failures and metrics.jsonl for per-step
scalar series.
"""

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

from kdslu.console import console


class LogLevel(Enum):
    """Log levels in order of importance."""
    DEBUG = "debug"
    ROUTINE = "routine"
    IMPORTANT = "important"
    CRITICAL = "critical"


LOG_LEVEL_ORDER = {
    LogLevel.DEBUG: 0,
    LogLevel.ROUTINE: 1,
    LogLevel.IMPORTANT: 2,
    LogLevel.CRITICAL: 3,
}


def _level_from_name(name: str) -> LogLevel:
    try:
        return LogLevel(name)
    except ValueError:
        return LogLevel.ROUTINE


@dataclass
class LogEvent:
    """A logged event."""

    timestamp: str
    event_type: str
    level: str
    run_id: Optional[str]
    data: dict

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "timestamp": self.timestamp,
            "event_type": self.event_type,
            "level": self.level,
            "run_id": self.run_id,
            "data": self.data,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LogEvent":
        """Create from dictionary."""
        return cls(
            timestamp=data.get("timestamp", ""),
            event_type=data.get("event_type", ""),
            level=data.get("level", "routine"),
            run_id=data.get("run_id"),
            data=data.get("data", {}),
        )


class EventLogger:
    """Logger for training-run events and metric series."""

    def __init__(
        self,
        logs_dir: Path,
        run_id: Optional[str] = None,
        min_level: LogLevel = LogLevel.DEBUG,
        echo: bool = False,
    ):
        """
        Initialize the event logger.

        Args:
            logs_dir: Path to the run's logs/ directory.
            run_id: Identifier stamped on every event.
            min_level: Events below this level are dropped.
            echo: Also print important events to the console.
        """
        self.logs_dir = logs_dir
        self.run_id = run_id
        self.min_level = min_level
        self.echo = echo
        self._last_step: dict[str, int] = {}
        self.logs_dir.mkdir(parents=True, exist_ok=True)

    def _get_log_file(self, log_type: str) -> Path:
        """Get the path to a log file."""
        return self.logs_dir / f"{log_type}.jsonl"

    def _write_event(self, log_type: str, event: LogEvent) -> None:
        """Write an event to a log file."""
        with open(self._get_log_file(log_type), "a") as f:
            f.write(json.dumps(event.to_dict()) + "\n")

    def _create_event(self, event_type: str, data: dict, level: LogLevel) -> LogEvent:
        return LogEvent(
            timestamp=datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            event_type=event_type,
            level=level.value,
            run_id=self.run_id,
            data=data,
        )

    def _enabled(self, level: LogLevel) -> bool:
        return LOG_LEVEL_ORDER[level] >= LOG_LEVEL_ORDER[self.min_level]

    def log_event(self, event_type: str, data: dict, level: LogLevel = LogLevel.ROUTINE) -> None:
        """
        Log a generic event.

        Args:
            event_type: Type of event.
            data: Event data.
            level: Log level.
        """
        if not self._enabled(level):
            return
        event = self._create_event(event_type, data, level)
        self._write_event("events", event)
        if self.echo and LOG_LEVEL_ORDER[level] >= LOG_LEVEL_ORDER[LogLevel.IMPORTANT]:
            console.print(f"[muted]{format_log_event(event)}[/muted]")

    def log_metric(self, name: str, step: int, value: float, **context) -> None:
        """
        Append one point to a metric series.

        Raises:
            ValueError: If step goes backwards for this metric.
        """
        last = self._last_step.get(name)
        if last is not None and step < last:
            raise ValueError(f"Metric {name!r} step {step} precedes logged step {last}")
        self._last_step[name] = step
        data = {"name": name, "step": step, "value": float(value), **context}
        self._write_event("metrics", self._create_event("metric", data, LogLevel.DEBUG))

    def log_error(
        self,
        error: str,
        details: Optional[dict] = None,
        level: LogLevel = LogLevel.CRITICAL,
    ) -> None:
        """
        Log an error.

        Args:
            error: Error message.
            details: Additional details.
            level: Log level.
        """
        data = {"error": error, "details": details or {}}
        event = self._create_event("error", data, level)
        self._write_event("errors", event)
        self._write_event("events", event)

    def log_stage_start(self, stage: str, config_hash: str, seed: int) -> None:
        self.log_event(
            "stage_start", {"stage": stage, "config_hash": config_hash, "seed": seed}, LogLevel.IMPORTANT
        )

    def log_stage_end(self, stage: str, status: str, wall_clock_seconds: float, metrics: dict) -> None:
        data = {
            "stage": stage,
            "status": status,
            "wall_clock_seconds": wall_clock_seconds,
            "metrics": metrics,
        }
        self.log_event("stage_end", data, LogLevel.IMPORTANT)


def read_log_file(
    log_file: Path,
    limit: Optional[int] = None,
    offset: int = 0,
) -> list[LogEvent]:
    """
    Read events from a log file.

    Args:
        log_file: Path to the log file.
        limit: Maximum events to return.
        offset: Number of events to skip.

    Returns:
        List of LogEvent objects.
    """
    if not log_file.exists():
        return []

    events = []
    with open(log_file) as f:
        for i, line in enumerate(f):
            if i < offset:
                continue
            if limit and len(events) >= limit:
                break

            line = line.strip()
            if line:
                try:
                    events.append(LogEvent.from_dict(json.loads(line)))
                except json.JSONDecodeError:
                    continue

    return events


def query_logs(
    logs_dir: Path,
    log_type: str = "events",
    query: Optional[str] = None,
    min_level: LogLevel = LogLevel.ROUTINE,
    limit: int = 100,
    reverse: bool = True,
) -> list[LogEvent]:
    """
    Query logs with filters.

    Args:
        logs_dir: Path to logs directory.
        log_type: Type of log to query ("events", "errors", "metrics").
        query: Text query to filter by.
        min_level: Minimum log level.
        limit: Maximum events to return.
        reverse: Return newest first.

    Returns:
        List of matching LogEvent objects.
    """
    events = read_log_file(logs_dir / f"{log_type}.jsonl")

    min_level_order = LOG_LEVEL_ORDER[min_level]
    events = [e for e in events if LOG_LEVEL_ORDER[_level_from_name(e.level)] >= min_level_order]

    if query:
        query_lower = query.lower()
        events = [
            e for e in events
            if query_lower in e.event_type.lower() or query_lower in json.dumps(e.data).lower()
        ]

    if reverse:
        events = list(reversed(events))

    return events[:limit]


def read_metric_series(logs_dir: Path) -> dict[str, list[tuple[int, float]]]:
    """(step, value) points per metric name, in logged order."""
    series: dict[str, list[tuple[int, float]]] = {}
    for event in read_log_file(logs_dir / "metrics.jsonl"):
        series.setdefault(event.data["name"], []).append((int(event.data["step"]), float(event.data["value"])))
    return series


def format_log_event(event: LogEvent) -> str:
    """
    Format a log event for display.

    Args:
        event: LogEvent to format.

    Returns:
        Formatted string.
    """
    timestamp = event.timestamp[:19].replace("T", " ")
    run_str = f"[{event.run_id}]" if event.run_id else "[---]"
    level_str = event.level.upper()[:4]

    if event.event_type == "error":
        data_str = event.data.get("error", str(event.data))
    elif event.event_type == "metric":
        data_str = f"{event.data.get('name')}@{event.data.get('step')} = {event.data.get('value'):.6g}"
    elif event.event_type == "stage_end":
        data_str = f"{event.data.get('stage')} {event.data.get('status')}"
    else:
        data_str = str(event.data)[:100]

    return f"{timestamp} {run_str} {level_str} {event.event_type}: {data_str}"
