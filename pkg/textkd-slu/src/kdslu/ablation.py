"""Cumulative ablation: baseline, +PT-KD, +FT-KD, +AM-PT, +DA.

Each seed pre-trains one MLM base encoder on the speech of the whole
training split, with transcripts removed. Every low-resource part then
trains its own teacher, PT-KD encoder and CTC-pre-trained AM from its
own speech-text pairs, and fine-tunes one system per method on them.
A failure while building artifacts marks the affected seed or part
missing for every method; the other seeds, parts and methods still run.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from kdslu.acoustic_model import AcousticModel
from kdslu.config import Config, config_hash
from kdslu.console import create_ablation_table, format_accuracy
from kdslu.data.splits import make_low_resource_splits
from kdslu.exceptions import ConfigValidationError, KdSluError, ParseError
from kdslu.experiment import PreparedData, finetune_slu, pretrain_am, pretrain_encoder, train_teacher
from kdslu.logging import EventLogger, LogLevel
from kdslu.speech_encoder import SpeechEncoder
from kdslu.text_pipeline import TextTeacher
from kdslu.tokenizer_vq import Codebook
from kdslu.training import Example

REPORT_VERSION = 1


@dataclass(frozen=True)
class MethodSpec:
    """Which components one ablation row enables."""

    name: str
    pt_kd: bool = False
    ft_kd: bool = False
    am_pt: bool = False
    da: bool = False


METHOD_STACK = (
    MethodSpec("baseline"),
    MethodSpec("+PT-KD", pt_kd=True),
    MethodSpec("+FT-KD", pt_kd=True, ft_kd=True),
    MethodSpec("+AM-PT", pt_kd=True, ft_kd=True, am_pt=True),
    MethodSpec("+DA", pt_kd=True, ft_kd=True, am_pt=True, da=True),
)


@dataclass
class AblationRun:
    """Result of one (method, seed, part) fine-tuning run."""

    method: str
    seed: int
    part: int
    status: str  # "complete" or "failed"
    valid_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    error: str = ""


@dataclass
class MethodSummary:
    """Mean and standard deviation over completed runs of one method."""

    method: str
    valid_mean: float
    valid_std: float
    test_mean: float
    test_std: float
    completed: int
    missing_seeds: list[int] = field(default_factory=list)


@dataclass
class AblationReport:
    runs: list[AblationRun] = field(default_factory=list)
    summaries: list[MethodSummary] = field(default_factory=list)
    config_hash: str = ""


@dataclass
class PartArtifacts:
    """Models of one seed and training part, shared by every method."""

    teacher: TextTeacher
    teacher_accuracy: float
    base_encoder: SpeechEncoder
    ptkd_encoder: SpeechEncoder
    am_pretrained: AcousticModel


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    return float(np.mean(values)), float(np.std(values))


def summarize(runs: list[AblationRun], methods=METHOD_STACK) -> list[MethodSummary]:
    """Aggregate completed runs per method, in stack order."""
    summaries = []
    for spec in methods:
        rows = [r for r in runs if r.method == spec.name]
        done = [r for r in rows if r.status == "complete"]
        valid_mean, valid_std = _mean_std([r.valid_accuracy for r in done if r.valid_accuracy is not None])
        test_mean, test_std = _mean_std([r.test_accuracy for r in done if r.test_accuracy is not None])
        summaries.append(
            MethodSummary(
                method=spec.name,
                valid_mean=valid_mean,
                valid_std=valid_std,
                test_mean=test_mean,
                test_std=test_std,
                completed=len(done),
                missing_seeds=sorted({r.seed for r in rows if r.status != "complete"}),
            )
        )
    return summaries


def _means(summaries: list[MethodSummary], column: str) -> list[float]:
    values = [getattr(s, f"{column}_mean") for s in summaries]
    return [v for v in values if not math.isnan(v)]


def ordering_holds(summaries: list[MethodSummary], tolerance: float = 0.005, column: str = "test") -> bool:
    """Whether mean accuracy is non-decreasing down the stack, allowing ties within tolerance."""
    means = _means(summaries, column)
    return all(b >= a - tolerance for a, b in zip(means, means[1:]))


def stack_gain(summaries: list[MethodSummary], column: str = "test") -> float:
    """Mean accuracy of the last row minus the first; NaN with fewer than two rows."""
    means = _means(summaries, column)
    if len(means) < 2:
        return math.nan
    return means[-1] - means[0]


# --- Report persistence ---


def _nan_to_none(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else value


def write_report(report: AblationReport, path: Path) -> Path:
    """
    Write one JSON object per line: a header, every run, every summary.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        header = {"record": "header", "version": REPORT_VERSION, "config_hash": report.config_hash}
        f.write(json.dumps(header) + "\n")
        for run in report.runs:
            f.write(json.dumps({"record": "run", **asdict(run)}) + "\n")
        for summary in report.summaries:
            data = asdict(summary)
            for key in ("valid_mean", "valid_std", "test_mean", "test_std"):
                data[key] = _nan_to_none(data[key])
            f.write(json.dumps({"record": "summary", **data}) + "\n")
    return path


def read_report(path: Path) -> AblationReport:
    """
    Read a report written by write_report.

    Raises:
        ParseError: On a malformed line or an unknown record type.
    """
    report = AblationReport()
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                kind = data.pop("record")
                if kind == "header":
                    report.config_hash = data.get("config_hash", "")
                elif kind == "run":
                    report.runs.append(AblationRun(**data))
                elif kind == "summary":
                    for key in ("valid_mean", "valid_std", "test_mean", "test_std"):
                        if data[key] is None:
                            data[key] = math.nan
                    report.summaries.append(MethodSummary(**data))
                else:
                    raise ParseError(str(path), number, f"Unknown record type {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(str(path), number, f"Malformed record: {e}")
    return report


def render_report(report: AblationReport):
    """Rich table of the method summaries."""
    table = create_ablation_table()
    for s in report.summaries:
        seeds = f"{s.completed}"
        if s.missing_seeds:
            seeds += "*"
        table.add_row(
            s.method,
            format_accuracy(s.valid_mean, s.valid_std),
            format_accuracy(s.test_mean, s.test_std),
            seeds,
        )
    return table


# --- Runner ---


class AblationRunner:
    """Runs the cumulative method stack over seeds and low-resource parts."""

    def __init__(
        self,
        config: Config,
        data: PreparedData,
        codebook: Codebook,
        logger: Optional[EventLogger] = None,
        on_run: Optional[Callable[[AblationRun], None]] = None,
        methods: tuple[MethodSpec, ...] = METHOD_STACK,
    ):
        self.config = config
        self.methods = methods
        self.data = data
        self.codebook = codebook
        self.logger = logger
        self.on_run = on_run

    def train_parts(self, seed: int) -> list[list]:
        """Training sets for a seed: low-resource parts or the full split."""
        ablation = self.config.ablation
        if not ablation.low_resource:
            return [self.data.train]
        parts = make_low_resource_splits(self.data.train, ablation.parts, seed)
        return parts[: max(1, ablation.max_parts)]

    def seed_logger(self, seed: int, part: Optional[int] = None) -> Optional[EventLogger]:
        """Stage metrics go to logs/seed<N>/, and part artifacts to logs/seed<N>/part<P>/."""
        if self.logger is None:
            return None
        logs_dir = self.logger.logs_dir / f"seed{seed}"
        if part is not None:
            logs_dir = logs_dir / f"part{part}"
        return EventLogger(logs_dir, run_id=self.logger.run_id, min_level=self.logger.min_level)

    def base_encoder(self, seed: int) -> SpeechEncoder:
        """MLM encoder over the speech of the whole training split, transcripts removed."""
        unpaired = [replace(e, text=None, ctc_targets=None) for e in self.data.train]
        data = replace(self.data, train=unpaired)
        encoder, _ = pretrain_encoder(self.config, data, self.codebook, seed, logger=self.seed_logger(seed))
        return encoder

    def part_artifacts(
        self, seed: int, part: int, train: Sequence[Example], base: SpeechEncoder
    ) -> PartArtifacts:
        """Teacher, PT-KD encoder and CTC-pre-trained AM from the pairs of one part."""
        config, data, codebook = self.config, self.data, self.codebook
        logger = self.seed_logger(seed, part)
        teacher, _, accuracy = train_teacher(config, data, seed, train=train)
        ptkd, _ = pretrain_encoder(
            config, data, codebook, seed, teacher=teacher, init=base, train=train, logger=logger
        )
        am, _ = pretrain_am(config, data, codebook, ptkd, seed, train=train, logger=logger)
        return PartArtifacts(teacher, accuracy, base, ptkd, am)

    def run_method(
        self, spec: MethodSpec, artifacts: PartArtifacts, seed: int, part: int, train: list[Example]
    ) -> AblationRun:
        encoder = artifacts.ptkd_encoder if spec.pt_kd else artifacts.base_encoder
        _, result = finetune_slu(
            self.config,
            self.data,
            self.codebook,
            encoder,
            seed,
            teacher=artifacts.teacher,
            teacher_acc=artifacts.teacher_accuracy,
            am_init=artifacts.am_pretrained if spec.am_pt else None,
            use_kd=spec.ft_kd,
            augment=spec.da,
            train=train,
        )
        return AblationRun(
            method=spec.name,
            seed=seed,
            part=part,
            status="complete",
            valid_accuracy=result.best_valid_accuracy,
            test_accuracy=result.test_accuracy,
        )

    def _record(self, report: AblationReport, run: AblationRun) -> None:
        report.runs.append(run)
        if self.logger is not None:
            level = LogLevel.IMPORTANT if run.status == "complete" else LogLevel.CRITICAL
            self.logger.log_event("ablation_run", asdict(run), level)
        if self.on_run is not None:
            self.on_run(run)

    def _fail(self, report: AblationReport, seed: int, parts: Iterable[int], error: Exception) -> None:
        for part in parts:
            for spec in self.methods:
                self._record(report, AblationRun(spec.name, seed, part, "failed", error=str(error)))

    def run(self) -> AblationReport:
        report = AblationReport(config_hash=config_hash(self.config))
        for seed in self.config.ablation.seeds:
            parts = self.train_parts(seed)
            try:
                base = self.base_encoder(seed)
            except (KdSluError, RuntimeError) as e:
                self._fail(report, seed, range(len(parts)), e)
                continue
            for part, train in enumerate(parts):
                try:
                    artifacts = self.part_artifacts(seed, part, train, base)
                except (KdSluError, RuntimeError) as e:
                    self._fail(report, seed, [part], e)
                    continue
                for spec in self.methods:
                    try:
                        run = self.run_method(spec, artifacts, seed, part, train)
                    except (KdSluError, RuntimeError) as e:
                        run = AblationRun(spec.name, seed, part, "failed", error=str(e))
                    self._record(report, run)
        report.summaries = summarize(report.runs, self.methods)
        return report


def select_methods(names: Optional[list[str]]) -> tuple[MethodSpec, ...]:
    """
    Rows of the stack named in `names`, kept in stack order.

    Raises:
        ConfigValidationError: On an unknown method name.
    """
    if not names:
        return METHOD_STACK
    known = {spec.name for spec in METHOD_STACK}
    for name in names:
        if name not in known:
            raise ConfigValidationError("ablation.methods", f"Unknown method {name!r}")
    return tuple(spec for spec in METHOD_STACK if spec.name in names)
