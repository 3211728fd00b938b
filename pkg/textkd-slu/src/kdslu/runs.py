"""Run records, run directories and the shared artifact store."""

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

from kdslu.config import Config, config_hash, config_to_dict, save_config
from kdslu.exceptions import CheckpointError, MissingArtifactError, RunLockedError
from kdslu.logging import EventLogger, LogLevel, read_metric_series
from kdslu.version import __version__

# Current schema version - increment when making breaking changes
SCHEMA_VERSION = 1

RUN_STATUSES = ("running", "complete", "failed")

ARTIFACTS = {
    "manifest": "data/manifest.tsv",
    "codebook": "codebook.txt",
    "teacher": "teacher.pt",
    "speech_base": "speech_base.pt",
    "speech_ptkd": "speech_ptkd.pt",
    "am_pt": "am_pt.pt",
    "slu": "slu.pt",
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass
class RunRecord:
    """Everything needed to identify and reproduce one stage run."""

    run_id: str
    stage: str
    seed: int
    config_hash: str
    config: dict
    status: str = "running"
    started: str = field(default_factory=_now)
    ended: Optional[str] = None
    wall_clock_seconds: float = 0.0
    final_metrics: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    package_version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.status not in RUN_STATUSES:
            raise CheckpointError(f"Invalid run status: {self.status}")


def _record_to_dict(record: RunRecord) -> dict:
    """Convert RunRecord to dictionary for serialization."""
    return {
        "run_id": record.run_id,
        "stage": record.stage,
        "seed": record.seed,
        "config_hash": record.config_hash,
        "config": record.config,
        "status": record.status,
        "started": record.started,
        "ended": record.ended,
        "wall_clock_seconds": record.wall_clock_seconds,
        "final_metrics": record.final_metrics,
        "checkpoints": record.checkpoints,
        "package_version": record.package_version,
        "schema_version": record.schema_version,
    }


def _dict_to_record(data: dict) -> RunRecord:
    """Convert dictionary to RunRecord."""
    return RunRecord(
        run_id=data["run_id"],
        stage=data["stage"],
        seed=data.get("seed", 0),
        config_hash=data.get("config_hash", ""),
        config=data.get("config", {}),
        status=data.get("status", "running"),
        started=data.get("started", ""),
        ended=data.get("ended"),
        wall_clock_seconds=data.get("wall_clock_seconds", 0.0),
        final_metrics=data.get("final_metrics", {}),
        checkpoints=data.get("checkpoints", {}),
        package_version=data.get("package_version", __version__),
        schema_version=data.get("schema_version", SCHEMA_VERSION),
    )


def make_run_id(stage: str, config: Config, seed: int) -> str:
    return f"{stage}-{config_hash(config)}-s{seed}"


def save_run_record(run_dir: Path, record: RunRecord) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "run.json", "w") as f:
        json.dump(_record_to_dict(record), f, indent=2)


def load_run_record(run_dir: Path) -> RunRecord:
    """
    Load a run record.

    Raises:
        CheckpointError: If run.json is missing or invalid.
    """
    path = run_dir / "run.json"
    try:
        with open(path) as f:
            return _dict_to_record(json.load(f))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise CheckpointError(f"Cannot read run record {path}: {e}")


def load_metric_series(run_dir: Path) -> dict[str, list[tuple[int, float]]]:
    return read_metric_series(run_dir / "logs")


@contextmanager
def run_lock(run_dir: Path) -> Iterator[Path]:
    """
    Hold an exclusive lock file on a run directory.

    Raises:
        RunLockedError: If another process holds the lock.
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(str(lock_path))
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)


@dataclass
class RunContext:
    """An active run: its directory, record and logger."""

    run_dir: Path
    record: RunRecord
    logger: EventLogger
    _started_at: float = field(default_factory=time.monotonic)

    def finish(
        self,
        status: str,
        final_metrics: Optional[dict] = None,
        checkpoints: Optional[dict] = None,
    ) -> RunRecord:
        self.record.status = status
        self.record.ended = _now()
        self.record.wall_clock_seconds = time.monotonic() - self._started_at
        self.record.final_metrics.update(final_metrics or {})
        self.record.checkpoints.update({k: str(v) for k, v in (checkpoints or {}).items()})
        save_run_record(self.run_dir, self.record)
        self.logger.log_stage_end(
            self.record.stage, status, self.record.wall_clock_seconds, self.record.final_metrics
        )
        return self.record


@contextmanager
def start_run(config: Config, stage: str, seed: int, echo: bool = False) -> Iterator[RunContext]:
    """
    Open a locked run directory under <out_root>/runs/ for one stage.

    The run is marked complete when the block exits normally; any
    exception marks it failed (and is re-raised).
    """
    run_id = make_run_id(stage, config, seed)
    run_dir = Path(config.paths.out_root) / "runs" / run_id
    with run_lock(run_dir):
        # A rerun of the same stage, config and seed replaces the previous logs.
        for stale in (run_dir / "logs").rglob("*.jsonl"):
            stale.unlink()
        save_config(config, run_dir / "config.yaml")
        record = RunRecord(
            run_id=run_id,
            stage=stage,
            seed=seed,
            config_hash=config_hash(config),
            config=config_to_dict(config),
        )
        save_run_record(run_dir, record)
        logger = EventLogger(
            run_dir / "logs",
            run_id=run_id,
            min_level=LogLevel(config.logging.level),
            echo=echo,
        )
        logger.log_stage_start(stage, record.config_hash, seed)
        context = RunContext(run_dir=run_dir, record=record, logger=logger)
        try:
            yield context
        except BaseException as e:
            logger.log_error(str(e), {"type": type(e).__name__})
            context.finish("failed")
            raise
        if record.status == "running":
            context.finish("complete")


class ArtifactStore:
    """Named artifacts shared between stages under <out_root>/artifacts/."""

    def __init__(self, out_root: Path):
        self.root = Path(out_root) / "artifacts"

    def path(self, name: str) -> Path:
        if name not in ARTIFACTS:
            raise KeyError(f"Unknown artifact {name!r}")
        return self.root / ARTIFACTS[name]

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def require(self, name: str) -> Path:
        """
        Path of an artifact that must already exist.

        Raises:
            MissingArtifactError: If it has not been produced yet.
        """
        path = self.path(name)
        if not path.exists():
            raise MissingArtifactError(name, str(path))
        return path
