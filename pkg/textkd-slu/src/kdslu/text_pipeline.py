"""Character-level text teacher: vocabulary, tokenizer, encoder and fine-tuning."""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from kdslu.config import StageConfig, TextEncoderConfig
from kdslu.exceptions import (
    ConfigValidationError,
    EmptyInputError,
    LabelError,
    LengthError,
    ParseError,
    VocabError,
)
from kdslu.optim import (
    advance_scheduler,
    build_optimizer,
    build_scheduler,
    epoch_batches,
    seed_everything,
    steps_per_epoch,
)
from kdslu.transformer import EncoderBackbone, IdBatch, pad_sequences

# Characters that can appear in a normalized transcript.
CHARSET = "abcdefghijklmnopqrstuvwxyz '"

TEXT_SPECIALS = ("<pad>", "<cls>", "<unk>")


@dataclass(frozen=True)
class TextVocabulary:
    """Character vocabulary; the id of a symbol is its index."""

    symbols: tuple[str, ...] = TEXT_SPECIALS + tuple(CHARSET)

    def __post_init__(self):
        if tuple(self.symbols[: len(TEXT_SPECIALS)]) != TEXT_SPECIALS:
            raise VocabError("Vocabulary must start with <pad>, <cls>, <unk>")
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabError("Vocabulary symbols must be unique")

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            return self.unk_id

    @property
    def _index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def save(self, path: Path) -> None:
        """Write one symbol per line."""
        path.parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "TextVocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        for number, line in enumerate(lines, start=1):
            if line not in TEXT_SPECIALS and len(line) != 1:
                raise ParseError(str(path), number, f"Expected a single character, got {line!r}")
        try:
            return cls(tuple(lines))
        except VocabError as e:
            raise ParseError(str(path), 1, str(e))


@dataclass(frozen=True, eq=False)
class TextTokenSequence:
    """Character ids of one transcript, CLS not included."""

    tokens: np.ndarray
    vocab_size: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "tokens", tokens)
        if tokens.ndim != 1 or tokens.shape[0] < 1:
            raise EmptyInputError("Text token sequence must be non-empty")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise VocabError(f"Text token ids must lie in [0, {self.vocab_size})")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def normalize_transcript(text: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return " ".join(text.lower().split())


def tokenize_text(text: str, vocab: Optional[TextVocabulary] = None) -> TextTokenSequence:
    """
    Map a transcript to character ids; unknown characters become UNK.

    Raises:
        EmptyInputError: If the normalized transcript is empty.
    """
    vocab = vocab or TextVocabulary()
    normalized = normalize_transcript(text)
    if not normalized:
        raise EmptyInputError("Transcript is empty")
    index = vocab._index
    ids = [index.get(ch, vocab.unk_id) for ch in normalized]
    return TextTokenSequence(np.array(ids, dtype=np.int64), vocab.size)


@dataclass
class TeacherOutputs:
    """CLS vectors and intent logits of the text teacher."""

    cls: torch.Tensor  # (B, D_t)
    logits: torch.Tensor  # (B, C)


TextInput = Union[TextTokenSequence, IdBatch]


class TextTeacher(nn.Module):
    """Transformer over characters with an intent classifier on CLS."""

    def __init__(self, config: TextEncoderConfig, vocab: Optional[TextVocabulary] = None):
        super().__init__()
        self.config = config
        self.vocab = vocab or TextVocabulary()
        if self.vocab.size != config.vocab_size:
            raise ConfigValidationError(
                "text.vocab_size", f"Vocabulary has {self.vocab.size} symbols, config says {config.vocab_size}"
            )
        self.backbone = EncoderBackbone(
            vocab_size=config.vocab_size,
            hidden_dim=config.hidden_dim,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            ffn_dim=config.ffn_dim,
            max_length=config.max_length,
            dropout=config.dropout,
        )
        self.classifier = nn.Linear(config.hidden_dim, config.num_classes)

    def collate(self, sequences: Sequence[TextTokenSequence]) -> IdBatch:
        tensors = [torch.as_tensor(s.tokens, dtype=torch.long) for s in sequences]
        return pad_sequences(tensors, self.vocab.pad_id)

    def forward(self, tokens: TextInput) -> TeacherOutputs:
        """
        Encode characters and classify from the CLS state.

        Raises:
            LengthError: If the transcript exceeds max_length - 1 characters.
        """
        ids, padding = self.collate([tokens]) if isinstance(tokens, TextTokenSequence) else tokens
        if ids.shape[1] > self.config.max_length - 1:
            raise LengthError(
                f"Transcript of {ids.shape[1]} characters exceeds the limit of {self.config.max_length - 1}"
            )
        cls_column = torch.full((ids.shape[0], 1), self.vocab.cls_id, dtype=torch.long, device=ids.device)
        states = self.backbone(
            torch.cat([cls_column, ids], dim=1),
            torch.cat([torch.zeros_like(padding[:, :1]), padding], dim=1),
        )
        cls = states[:, 0]
        return TeacherOutputs(cls=cls, logits=self.classifier(cls))


def teacher_forward(teacher: TextTeacher, tokens: TextInput) -> TeacherOutputs:
    return teacher(tokens)


@dataclass
class TeacherReport:
    """Outcome of teacher fine-tuning."""

    best_epoch: int
    best_valid_accuracy: Optional[float]
    train_losses: list[float] = field(default_factory=list)
    valid_accuracies: list[float] = field(default_factory=list)


def teacher_accuracy(
    teacher: TextTeacher, examples: Sequence[tuple[TextTokenSequence, int]], batch_size: int = 64
) -> float:
    """Intent accuracy of the teacher on (tokens, label) pairs."""
    if not examples:
        raise EmptyInputError("No examples to evaluate")
    teacher.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            logits = teacher(teacher.collate([tokens for tokens, _ in chunk])).logits
            labels = torch.tensor([label for _, label in chunk])
            correct += int((logits.argmax(dim=-1) == labels).sum())
    return correct / len(examples)


def _check_labels(examples: Sequence[tuple[TextTokenSequence, int]], num_classes: int) -> None:
    for _, label in examples:
        if not 0 <= label < num_classes:
            raise LabelError(f"Label {label} is outside [0, {num_classes})")


def finetune_teacher(
    train: Sequence[tuple[TextTokenSequence, int]],
    valid: Sequence[tuple[TextTokenSequence, int]],
    config: TextEncoderConfig,
    stage: StageConfig,
    vocab: Optional[TextVocabulary] = None,
    on_epoch=None,
) -> tuple[TextTeacher, TeacherReport]:
    """
    Train a text teacher on (transcript tokens, intent) pairs.

    The returned teacher carries the weights of the epoch with the best
    validation accuracy; without validation data the final epoch is kept.

    Raises:
        EmptyInputError: If there are no training examples.
        LabelError: If a label is outside the configured classes.
    """
    if not train:
        raise EmptyInputError("Teacher fine-tuning needs at least one example")
    _check_labels(train, config.num_classes)
    _check_labels(valid, config.num_classes)

    seed_everything(stage.seed)
    teacher = TextTeacher(config, vocab)
    optimizer = build_optimizer(list(teacher.parameters()), stage)
    scheduler = build_scheduler(optimizer, stage.schedule)
    report = TeacherReport(best_epoch=0, best_valid_accuracy=None)
    best_state = copy.deepcopy(teacher.state_dict())
    epoch_steps = steps_per_epoch(len(train), stage.batch_size)

    step = 0
    for epoch in range(stage.max_epochs):
        teacher.train()
        epoch_loss = 0.0
        for indices in epoch_batches(len(train), stage.batch_size, stage.seed, epoch):
            chunk = [train[int(i)] for i in indices]
            logits = teacher(teacher.collate([tokens for tokens, _ in chunk])).logits
            loss = F.cross_entropy(logits, torch.tensor([label for _, label in chunk]))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            advance_scheduler(scheduler, stage.schedule, step, epoch_steps)
            step += 1
            epoch_loss += float(loss) * len(chunk)
        report.train_losses.append(epoch_loss / len(train))

        if valid:
            accuracy = teacher_accuracy(teacher, valid)
            report.valid_accuracies.append(accuracy)
            if report.best_valid_accuracy is None or accuracy > report.best_valid_accuracy:
                report.best_valid_accuracy = accuracy
                report.best_epoch = epoch
                best_state = copy.deepcopy(teacher.state_dict())
        else:
            report.best_epoch = epoch
            best_state = copy.deepcopy(teacher.state_dict())

        if on_epoch is not None:
            on_epoch(epoch, report)

    teacher.load_state_dict(best_state)
    teacher.eval()
    return teacher, report
