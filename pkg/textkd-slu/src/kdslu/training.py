"""Training stages: MLM / PT-KD pre-training, CTC pre-training and fine-tuning.

Every step reports its loss terms, their weights and the weighted total
in a LossReport. Stages freeze parameter groups according to their
StageConfig before building the optimizer, so frozen groups are never
updated and carry no optimizer state.
"""

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from kdslu.acoustic_model import AcousticModel, CtcAlphabet, ctc_required_length, output_length
from kdslu.augmentation import AugmentationPolicy, augmentation_disabled, sample_span_mask
from kdslu.bundle import ModelBundle, SLUModel, set_frozen
from kdslu.config import DAConfig, MaskSpec, StageConfig
from kdslu.exceptions import (
    ConfigValidationError,
    EmptyInputError,
    LabelError,
    PairingError,
    TeacherQualityError,
)
from kdslu.logging import EventLogger, LogLevel
from kdslu.optim import (
    advance_scheduler,
    build_optimizer,
    build_scheduler,
    derive_seed,
    epoch_batches,
    seed_everything,
    step_batches,
    steps_per_epoch,
)
from kdslu.text_pipeline import TextTokenSequence
from kdslu.tokenizer_vq import TokenSequence
from kdslu.transformer import IdBatch

# Groups that must stay frozen in each stage.
REQUIRED_FROZEN = {
    "mlm": {"quantizer_codebook", "teacher"},
    "pt_kd": {"quantizer_codebook", "teacher"},
    "am_pt": {"quantizer_codebook", "speech_encoder"},
    "ft": {"quantizer_codebook", "speech_encoder", "teacher"},
}


@dataclass
class Example:
    """One utterance prepared for training."""

    tokens: TokenSequence
    label: int
    text: Optional[TextTokenSequence] = None
    ctc_targets: Optional[list[int]] = None
    utterance_id: str = ""


@dataclass
class LossReport:
    """Loss terms of one step and their weighted total."""

    step: int
    terms: dict[str, float]
    weights: dict[str, float]
    total: float

    def __post_init__(self):
        expected = weighted_sum(self.terms, self.weights)
        if abs(expected - self.total) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError(f"Loss total {self.total} differs from weighted terms {expected}")

    @classmethod
    def from_terms(cls, step: int, terms: dict[str, torch.Tensor], weights: dict[str, float]) -> "LossReport":
        values = {name: float(value.detach()) for name, value in terms.items()}
        return cls(step=step, terms=values, weights=dict(weights), total=weighted_sum(values, weights))


def weighted_sum(terms: dict, weights: dict[str, float]):
    """Sum of weight * term; a term without a weight counts once."""
    total = 0.0
    for name, value in terms.items():
        total = total + weights.get(name, 1.0) * value
    return total


def l1_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise L1 distance over the last axis."""
    return (a - b).abs().sum(dim=-1)


class EarlyStopper:
    """
    Stop when the windowed mean of a loss rises `patience` windows in a row.

    The mean over each full window of `window` steps is compared with the
    previous window's mean.
    """

    def __init__(self, window: int, patience: int):
        self.window = window
        self.patience = patience
        self.increases = 0
        self._buffer: list[float] = []
        self._previous: Optional[float] = None

    def update(self, value: float) -> bool:
        self._buffer.append(value)
        if len(self._buffer) < self.window:
            return False
        mean = float(np.mean(self._buffer))
        self._buffer.clear()
        if self._previous is not None and mean > self._previous:
            self.increases += 1
        else:
            self.increases = 0
        self._previous = mean
        return self.increases >= self.patience


def _apply_stage_freeze(bundle: ModelBundle, stage: StageConfig, name: str) -> None:
    missing = REQUIRED_FROZEN.get(name, set()) - set(stage.freeze)
    if missing:
        raise ConfigValidationError(
            f"training.{name}.freeze", f"Must include {', '.join(sorted(missing))}"
        )
    set_frozen(bundle, stage.freeze)


def paired_text(examples: Sequence[Example]) -> list[TextTokenSequence]:
    texts = [e.text for e in examples]
    if any(t is None for t in texts):
        missing = next(e.utterance_id for e in examples if e.text is None)
        raise PairingError(f"Utterance {missing!r} has no transcript to distill from")
    return texts


def _labels(examples: Sequence[Example], num_classes: int) -> torch.Tensor:
    labels = [e.label for e in examples]
    if any(not 0 <= label < num_classes for label in labels):
        raise LabelError(f"Labels must lie in [0, {num_classes})")
    return torch.tensor(labels, dtype=torch.long)


def _log_report(logger: Optional[EventLogger], stage_name: str, report: LossReport) -> None:
    if logger is None:
        return
    for name, value in report.terms.items():
        logger.log_metric(f"{stage_name}/{name}", report.step, value)
    logger.log_metric(f"{stage_name}/total", report.step, report.total)


# --- Pre-training: MLM and PT-KD ---


def sample_mlm_mask(batch: IdBatch, spec: MaskSpec, seed: int) -> torch.Tensor:
    """Span mask per row with at least one masked position per row."""
    ids, padding = batch
    mask = torch.zeros_like(ids, dtype=torch.bool)
    for row, length in enumerate((~padding).sum(dim=1).tolist()):
        row_mask = sample_span_mask(int(length), spec, (seed, row))
        if not row_mask.any():
            row_mask[np.random.default_rng((seed, row, 1)).integers(int(length))] = True
        mask[row, : int(length)] = torch.from_numpy(row_mask)
    return mask


def compute_pt_kd_loss(
    bundle: ModelBundle,
    examples: Sequence[Example],
    stage: StageConfig,
    mlm_mask: MaskSpec,
    seed: int,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    MLM loss on masked tokens plus, when weighted, the L1 distance between
    the speech CLS of the clean sequence and the teacher CLS of its transcript.

    Raises:
        PairingError: If distillation is weighted and an example has no transcript.
    """
    batch = bundle.speech.collate([e.tokens for e in examples])
    mask = sample_mlm_mask(batch, mlm_mask, seed)
    terms = {"mlm": bundle.speech.mlm_loss(batch, mask, rng_seed=seed)}
    if stage.loss_weights.get("kd", 0.0) > 0:
        if bundle.teacher is None:
            raise PairingError("Distillation is weighted but no text teacher is loaded")
        texts = paired_text(examples)
        speech_cls = bundle.speech(batch).cls
        if bundle.adapter is not None:
            speech_cls = speech_cls @ bundle.adapter
        with torch.no_grad():
            teacher_cls = bundle.teacher(bundle.teacher.collate(texts)).cls
        terms["kd"] = l1_distance(speech_cls, teacher_cls).mean()
    return weighted_sum(terms, stage.loss_weights), terms


def pt_kd_step(
    bundle: ModelBundle,
    examples: Sequence[Example],
    stage: StageConfig,
    optimizer: Optional[torch.optim.Optimizer],
    step: int,
    mlm_mask: MaskSpec,
) -> LossReport:
    """One pre-training update; the teacher stays in eval mode and is never updated."""
    bundle.speech.train()
    if bundle.teacher is not None:
        bundle.teacher.eval()
    total, terms = compute_pt_kd_loss(bundle, examples, stage, mlm_mask, derive_seed(stage.seed, step))
    if optimizer is not None:
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    return LossReport.from_terms(step, terms, stage.loss_weights)


def mean_cls_distance(bundle: ModelBundle, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Mean L1 distance between speech and teacher CLS vectors."""
    if bundle.teacher is None:
        raise PairingError("CLS distance needs a text teacher")
    if not examples:
        raise EmptyInputError("No examples to measure")
    texts = paired_text(examples)
    bundle.speech.eval()
    bundle.teacher.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            speech_cls = bundle.speech(bundle.speech.collate([e.tokens for e in chunk])).cls
            if bundle.adapter is not None:
                speech_cls = speech_cls @ bundle.adapter
            teacher_cls = bundle.teacher(bundle.teacher.collate(texts[start : start + batch_size])).cls
            total += float(l1_distance(speech_cls, teacher_cls).sum())
    return total / len(examples)


@dataclass
class PretrainResult:
    """Outcome of MLM or PT-KD pre-training."""

    history: list[LossReport] = field(default_factory=list)
    stopped_early: bool = False
    initial_distance: Optional[float] = None
    final_distance: Optional[float] = None

    @property
    def steps(self) -> int:
        return len(self.history)


def run_pt_kd(
    bundle: ModelBundle,
    train: Sequence[Example],
    stage: StageConfig,
    mlm_mask: MaskSpec,
    heldout: Sequence[Example] = (),
    stage_name: str = "pt_kd",
    logger: Optional[EventLogger] = None,
) -> PretrainResult:
    """
    Pre-train the speech encoder with MLM and, when weighted, CLS distillation.

    Stops after max_steps or when the smoothed MLM loss rises for `patience`
    consecutive windows; the distillation term does not affect stopping. With a teacher and held-out pairs, the mean CLS
    distance is measured before and after.
    """
    if not train:
        raise EmptyInputError("Pre-training needs at least one example")
    _apply_stage_freeze(bundle, stage, stage_name)
    seed_everything(stage.seed)
    optimizer = build_optimizer(bundle.trainable_parameters(), stage)
    scheduler = build_scheduler(optimizer, stage.schedule)
    measure = bundle.teacher is not None and bool(heldout) and stage.loss_weights.get("kd", 0.0) > 0

    result = PretrainResult()
    if measure:
        result.initial_distance = mean_cls_distance(bundle, heldout)
    stopper = EarlyStopper(stage.smoothing_window, stage.patience)
    batches = step_batches(len(train), stage.batch_size, stage.seed)
    epoch_steps = steps_per_epoch(len(train), stage.batch_size)
    for step in range(stage.max_steps):
        chunk = [train[int(i)] for i in next(batches)]
        report = pt_kd_step(bundle, chunk, stage, optimizer, step, mlm_mask)
        advance_scheduler(scheduler, stage.schedule, step, epoch_steps)
        result.history.append(report)
        _log_report(logger, stage_name, report)
        if stopper.update(report.terms["mlm"]):
            result.stopped_early = True
            if logger is not None:
                logger.log_event("early_stop", {"stage": stage_name, "step": step}, LogLevel.IMPORTANT)
            break

    bundle.speech.eval()
    if measure:
        result.final_distance = mean_cls_distance(bundle, heldout)
    return result


# --- CTC pre-training of the acoustic model ---


def ctc_feasible(example: Example, am: AcousticModel) -> bool:
    """Whether the AM output for this example is long enough to emit its transcript."""
    if example.ctc_targets is None:
        return False
    length = len(example.tokens.without_cls())
    if length < am.min_length:
        return False
    return ctc_required_length(example.ctc_targets) <= output_length(length, am.config.conv_layers)


def compute_ctc_loss(
    slu: SLUModel, examples: Sequence[Example], policy: Optional[AugmentationPolicy] = None
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    features = slu.features(slu.encoder.collate([e.tokens for e in examples]), policy)
    ctc = slu.am.ctc_loss(features, [e.ctc_targets for e in examples])
    return ctc, {"ctc": ctc}


def ctc_validation_loss(slu: SLUModel, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Mean CTC loss over examples, without augmentation or gradients."""
    slu.eval()
    total = 0.0
    with augmentation_disabled(), torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            loss, _ = compute_ctc_loss(slu, chunk)
            total += float(loss) * len(chunk)
    return total / len(examples)


def _edit_distance(a: str, b: str) -> int:
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def character_accuracy(
    slu: SLUModel, examples: Sequence[Example], alphabet: CtcAlphabet, batch_size: int = 64
) -> float:
    """1 - (total edit distance / total reference characters) of greedy CTC decoding."""
    slu.eval()
    errors, reference_chars = 0, 0
    with augmentation_disabled(), torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            features = slu.features(slu.encoder.collate([e.tokens for e in chunk]))
            for e, hypothesis in zip(chunk, slu.am.greedy_decode(features, alphabet)):
                reference = alphabet.decode(e.ctc_targets or [])
                errors += _edit_distance(hypothesis, reference)
                reference_chars += len(reference)
    return max(0.0, 1.0 - errors / max(reference_chars, 1))


@dataclass
class AmPretrainResult:
    """Outcome of CTC pre-training."""

    history: list[LossReport] = field(default_factory=list)
    best_valid_ctc: Optional[float] = None
    best_step: int = 0
    skipped: int = 0
    stopped_early: bool = False


def run_am_pretrain(
    bundle: ModelBundle,
    train: Sequence[Example],
    stage: StageConfig,
    valid: Sequence[Example] = (),
    da: Optional[DAConfig] = None,
    logger: Optional[EventLogger] = None,
) -> AmPretrainResult:
    """
    Train the acoustic model body and CTC head on transcripts, encoder frozen.

    Examples whose output is too short for their transcript are skipped and
    counted. The AM is left with the weights of the best validation CTC
    loss (training loss when there is no validation data).
    """
    _apply_stage_freeze(bundle, stage, "am_pt")
    feasible = [e for e in train if ctc_feasible(e, bundle.am)]
    result = AmPretrainResult(skipped=len(train) - len(feasible))
    if result.skipped and logger is not None:
        logger.log_event("ctc_skipped", {"count": result.skipped}, LogLevel.IMPORTANT)
    if not feasible:
        raise EmptyInputError("No training example admits a CTC alignment")
    valid_feasible = [e for e in valid if ctc_feasible(e, bundle.am)]

    seed_everything(stage.seed)
    optimizer = build_optimizer(bundle.trainable_parameters(), stage)
    scheduler = build_scheduler(optimizer, stage.schedule)
    best_state = copy.deepcopy(bundle.am.state_dict())
    stopper = EarlyStopper(stage.smoothing_window, stage.patience)
    batches = step_batches(len(feasible), stage.batch_size, stage.seed)
    epoch_steps = steps_per_epoch(len(feasible), stage.batch_size)

    for step in range(stage.max_steps):
        bundle.speech.eval()
        bundle.am.train()
        chunk = [feasible[int(i)] for i in next(batches)]
        policy = None
        if stage.augment and da is not None:
            policy = AugmentationPolicy.from_config(da, derive_seed(stage.seed, step))
        total, terms = compute_ctc_loss(bundle.slu, chunk, policy)
        if optimizer is not None:
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
        advance_scheduler(scheduler, stage.schedule, step, epoch_steps)
        report = LossReport.from_terms(step, terms, stage.loss_weights)
        result.history.append(report)
        _log_report(logger, "am_pt", report)

        if (step + 1) % stage.eval_every == 0 or step == stage.max_steps - 1:
            score = ctc_validation_loss(bundle.slu, valid_feasible) if valid_feasible else report.total
            if logger is not None:
                logger.log_metric("am_pt/valid_ctc", step, score)
            if result.best_valid_ctc is None or score < result.best_valid_ctc:
                result.best_valid_ctc = score
                result.best_step = step
                best_state = copy.deepcopy(bundle.am.state_dict())
        if stopper.update(report.total):
            result.stopped_early = True
            break

    bundle.am.load_state_dict(best_state)
    bundle.am.eval()
    return result


# --- Fine-tuning ---


def check_teacher_quality(accuracy: Optional[float], threshold: float) -> None:
    """
    Raises:
        TeacherQualityError: If the teacher's validation accuracy is unknown
            or below the threshold.
    """
    if accuracy is None or accuracy < threshold:
        raise TeacherQualityError(accuracy if accuracy is not None else 0.0, threshold)


def compute_ft_loss(
    bundle: ModelBundle,
    examples: Sequence[Example],
    stage: StageConfig,
    policy: Optional[AugmentationPolicy] = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    Cross-entropy on intent labels plus, when weighted, the L1 distance
    between student logits and the frozen teacher's logits.

    Raises:
        PairingError: If distillation is weighted and an example has no transcript.
    """
    labels = _labels(examples, bundle.am.config.num_classes)
    logits = bundle.slu(bundle.speech.collate([e.tokens for e in examples]), policy)
    terms = {"ce": F.cross_entropy(logits, labels)}
    if stage.loss_weights.get("kd", 0.0) > 0:
        if bundle.teacher is None:
            raise PairingError("Distillation is weighted but no text teacher is loaded")
        texts = paired_text(examples)
        with torch.no_grad():
            teacher_logits = bundle.teacher(bundle.teacher.collate(texts)).logits
        terms["kd"] = l1_distance(logits, teacher_logits).mean()
    return weighted_sum(terms, stage.loss_weights), terms


def ft_step(
    bundle: ModelBundle,
    examples: Sequence[Example],
    stage: StageConfig,
    optimizer: Optional[torch.optim.Optimizer],
    step: int,
    policy: Optional[AugmentationPolicy] = None,
) -> LossReport:
    bundle.speech.eval()
    bundle.am.train()
    if bundle.teacher is not None:
        bundle.teacher.eval()
    total, terms = compute_ft_loss(bundle, examples, stage, policy)
    if optimizer is not None:
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    return LossReport.from_terms(step, terms, stage.loss_weights)


def evaluate(slu: SLUModel, examples: Sequence[Example], batch_size: int = 64) -> float:
    """
    Intent accuracy from speech tokens alone.

    Augmentation is disabled for the whole call and transcripts are never read.
    """
    if not examples:
        raise EmptyInputError("No examples to evaluate")
    correct = 0
    with augmentation_disabled():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            predictions = slu.predict(slu.encoder.collate([e.tokens for e in chunk]))
            correct += int((predictions == torch.tensor([e.label for e in chunk])).sum())
    return correct / len(examples)


def predict_intents(slu: SLUModel, examples: Sequence[Example], batch_size: int = 64) -> list[int]:
    predictions: list[int] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        predictions.extend(slu.predict(slu.encoder.collate([e.tokens for e in chunk])).tolist())
    return predictions


@dataclass
class FinetuneResult:
    """Outcome of fine-tuning."""

    history: list[LossReport] = field(default_factory=list)
    valid_accuracies: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None


def run_finetune(
    bundle: ModelBundle,
    train: Sequence[Example],
    stage: StageConfig,
    valid: Sequence[Example] = (),
    test: Sequence[Example] = (),
    da: Optional[DAConfig] = None,
    teacher_accuracy: Optional[float] = None,
    min_teacher_accuracy: float = 0.95,
    logger: Optional[EventLogger] = None,
) -> FinetuneResult:
    """
    Fine-tune the acoustic model and its intent head on labelled speech.

    With a positive kd weight the teacher must reach min_teacher_accuracy.
    When stage.augment is set, every step draws fresh token, time and
    channel masks from `da`. The AM keeps the weights of the epoch with
    the best validation accuracy (the last epoch without validation data).

    Raises:
        TeacherQualityError: If distillation is requested from an inadequate teacher.
        EmptyInputError: If there are no training examples.
    """
    if not train:
        raise EmptyInputError("Fine-tuning needs at least one example")
    if stage.loss_weights.get("kd", 0.0) > 0:
        if bundle.teacher is None:
            raise TeacherQualityError(0.0, min_teacher_accuracy)
        check_teacher_quality(teacher_accuracy, min_teacher_accuracy)
    _apply_stage_freeze(bundle, stage, "ft")
    seed_everything(stage.seed)
    optimizer = build_optimizer(bundle.trainable_parameters(), stage)
    scheduler = build_scheduler(optimizer, stage.schedule)

    result = FinetuneResult()
    best_state = copy.deepcopy(bundle.am.state_dict())
    step = 0
    epoch_steps = steps_per_epoch(len(train), stage.batch_size)
    for epoch in range(stage.max_epochs):
        for indices in epoch_batches(len(train), stage.batch_size, stage.seed, epoch):
            policy = None
            if stage.augment and da is not None:
                policy = AugmentationPolicy.from_config(da, derive_seed(stage.seed, step))
            report = ft_step(bundle, [train[int(i)] for i in indices], stage, optimizer, step, policy)
            result.history.append(report)
            _log_report(logger, "ft", report)
            advance_scheduler(scheduler, stage.schedule, step, epoch_steps)
            step += 1

        if valid:
            accuracy = evaluate(bundle.slu, valid)
            result.valid_accuracies.append(accuracy)
            if logger is not None:
                logger.log_metric("ft/valid_accuracy", epoch, accuracy)
            if result.best_valid_accuracy is None or accuracy > result.best_valid_accuracy:
                result.best_valid_accuracy = accuracy
                result.best_epoch = epoch
                best_state = copy.deepcopy(bundle.am.state_dict())
        else:
            result.best_epoch = epoch
            best_state = copy.deepcopy(bundle.am.state_dict())

    bundle.am.load_state_dict(best_state)
    bundle.am.eval()
    if test:
        result.test_accuracy = evaluate(bundle.slu, test)
    return result
