"""DeepSpeech2-style acoustic model over contextualized speech features.

A stack of 2D convolutions (time x feature) with clipped-ReLU
activations is followed by a bidirectional LSTM. Two heads read the
recurrent outputs: an intent classifier over the max-pool across time,
and a per-timestep character head trained with CTC.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from kdslu.config import AMConfig, ConvLayerConfig
from kdslu.exceptions import InfeasibleAlignmentError, LengthError, ShapeError, VocabError
from kdslu.speech_encoder import HiddenSequence
from kdslu.text_pipeline import CHARSET, normalize_transcript

BLANK_ID = 0


class CtcAlphabet:
    """CTC output symbols: blank at 0, then the transcript characters."""

    def __init__(self, characters: str = CHARSET):
        self.characters = characters
        self._index = {ch: i + 1 for i, ch in enumerate(characters)}

    @property
    def size(self) -> int:
        return len(self.characters) + 1

    def encode(self, text: str) -> list[int]:
        """
        Map a transcript to CTC target ids.

        Raises:
            VocabError: If a character has no CTC symbol.
        """
        try:
            return [self._index[ch] for ch in normalize_transcript(text)]
        except KeyError as e:
            raise VocabError(f"Character {e.args[0]!r} is not in the CTC alphabet")

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.characters[i - 1] for i in ids if i != BLANK_ID)


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    padding = (kernel - 1) // 2
    return (length + 2 * padding - kernel) // stride + 1


def output_length(length: int, conv_layers: Sequence[ConvLayerConfig]) -> int:
    """Number of AM output frames for `length` input states."""
    for conv in conv_layers:
        length = conv_output_length(length, conv.kernel[0], conv.stride[0])
    return length


def min_input_length(conv_layers: Sequence[ConvLayerConfig]) -> int:
    """Shortest input that leaves at least one output frame after every convolution."""
    length = 1
    while True:
        current, feasible = length, True
        for conv in conv_layers:
            current = conv_output_length(current, conv.kernel[0], conv.stride[0])
            if current < 1:
                feasible = False
                break
        if feasible:
            return length
        length += 1


def ctc_required_length(targets: Sequence[int]) -> int:
    """Frames needed to emit a target: its length plus one blank per repeated pair."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def collapse_ctc(ids: Sequence[int], blank: int = BLANK_ID) -> list[int]:
    """Merge repeated symbols, then drop blanks."""
    return [symbol for symbol, _ in itertools.groupby(ids) if symbol != blank]


def ctc_negative_log_likelihood(log_probs: torch.Tensor, targets: Sequence[int]) -> torch.Tensor:
    """
    -log p(targets | log_probs) summed over all alignments.

    Args:
        log_probs: (T', A) per-frame log distributions over the alphabet.
        targets: Character ids, none of them blank.

    Raises:
        InfeasibleAlignmentError: If T' frames cannot emit the target.
    """
    if log_probs.dim() != 2:
        raise ShapeError("Expected (T', A) log probabilities")
    targets = list(targets)
    if any(t == BLANK_ID or t >= log_probs.shape[1] for t in targets):
        raise VocabError("CTC targets must be non-blank alphabet ids")
    required = ctc_required_length(targets)
    if required > log_probs.shape[0]:
        raise InfeasibleAlignmentError(required, int(log_probs.shape[0]))
    return F.ctc_loss(
        log_probs[:, None, :],
        torch.tensor([targets], dtype=torch.long),
        torch.tensor([log_probs.shape[0]]),
        torch.tensor([len(targets)]),
        blank=BLANK_ID,
        reduction="sum",
    )


@dataclass
class AMFeatures:
    """Recurrent outputs of the acoustic model."""

    values: torch.Tensor  # (B, T', 2H)
    lengths: torch.Tensor  # (B,) long

    @property
    def padding_mask(self) -> torch.Tensor:
        positions = torch.arange(self.values.shape[1], device=self.values.device)
        return positions[None, :] >= self.lengths[:, None]


class AcousticModel(nn.Module):
    """Convolutions + bidirectional LSTM with intent and CTC heads."""

    def __init__(self, config: AMConfig):
        super().__init__()
        self.config = config
        convs = []
        in_channels = 1
        feature_dim = config.input_dim
        for conv in config.conv_layers:
            convs.append(
                nn.Conv2d(
                    in_channels,
                    conv.channels,
                    kernel_size=tuple(conv.kernel),
                    stride=tuple(conv.stride),
                    padding=((conv.kernel[0] - 1) // 2, (conv.kernel[1] - 1) // 2),
                )
            )
            in_channels = conv.channels
            feature_dim = conv_output_length(feature_dim, conv.kernel[1], conv.stride[1])
        if feature_dim < 1:
            raise ShapeError("Convolutions reduce the feature axis to nothing")
        self.convs = nn.ModuleList(convs)
        self.activation = nn.Hardtanh(0, 20, inplace=False)
        self.rnn = nn.LSTM(
            input_size=in_channels * feature_dim,
            hidden_size=config.rnn_hidden,
            num_layers=config.rnn_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.intent_head = nn.Linear(2 * config.rnn_hidden, config.num_classes)
        self.ctc_head = nn.Linear(2 * config.rnn_hidden, config.alphabet_size)
        self.min_length = min_input_length(config.conv_layers)

    def body_modules(self) -> list[nn.Module]:
        return [self.convs, self.rnn]

    def head_modules(self) -> list[nn.Module]:
        return [self.intent_head, self.ctc_head]

    def reset_intent_head(self) -> None:
        """Re-initialize the intent classifier (after CTC pre-training)."""
        self.intent_head.reset_parameters()

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        for conv in self.config.conv_layers:
            lengths = conv_output_length(lengths, conv.kernel[0], conv.stride[0])
        return lengths

    def forward(self, hidden: HiddenSequence) -> AMFeatures:
        """
        Run convolutions and the recurrent stack over encoder states.

        Raises:
            ShapeError: If the state dimension differs from am.input_dim.
            LengthError: If a sequence is too short for the convolutions.
        """
        if hidden.dim != self.config.input_dim:
            raise ShapeError(f"Expected {self.config.input_dim}-dim states, got {hidden.dim}")
        lengths = hidden.lengths
        if int(lengths.min()) < self.min_length:
            raise LengthError(f"Sequences need at least {self.min_length} states")

        x = hidden.states.masked_fill(hidden.padding_mask[:, :, None], 0.0)[:, None]
        for conv in self.convs:
            x = self.activation(conv(x))
            lengths = conv_output_length(lengths, conv.kernel_size[0], conv.stride[0])
            valid = torch.arange(x.shape[2], device=x.device)[None, :] < lengths[:, None]
            x = x * valid[:, None, :, None].to(x.dtype)

        batch, channels, frames, features = x.shape
        x = x.permute(0, 2, 1, 3).reshape(batch, frames, channels * features)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        output, _ = self.rnn(packed)
        values, _ = pad_packed_sequence(output, batch_first=True, total_length=frames)
        return AMFeatures(values=values, lengths=lengths)

    def intent_logits(self, features: AMFeatures) -> torch.Tensor:
        """Max-pool valid frames over time, then the intent classifier."""
        pooled = features.values.masked_fill(features.padding_mask[:, :, None], -math.inf).max(dim=1).values
        return self.intent_head(pooled)

    def ctc_log_probs(self, features: AMFeatures) -> torch.Tensor:
        """(B, T', A) per-frame log distributions over the CTC alphabet."""
        return F.log_softmax(self.ctc_head(features.values), dim=-1)

    def ctc_loss(self, features: AMFeatures, targets: Sequence[Sequence[int]]) -> torch.Tensor:
        """
        Mean CTC negative log-likelihood over the batch.

        Raises:
            InfeasibleAlignmentError: If any row has too few output frames.
        """
        if len(targets) != features.values.shape[0]:
            raise ShapeError("One target sequence is needed per batch row")
        lengths = features.lengths.tolist()
        for row, target in enumerate(targets):
            required = ctc_required_length(list(target))
            if required > lengths[row]:
                raise InfeasibleAlignmentError(required, int(lengths[row]))

        log_probs = self.ctc_log_probs(features).transpose(0, 1)
        flat = torch.tensor([t for target in targets for t in target], dtype=torch.long)
        losses = F.ctc_loss(
            log_probs,
            flat,
            features.lengths,
            torch.tensor([len(t) for t in targets], dtype=torch.long),
            blank=BLANK_ID,
            reduction="none",
        )
        return losses.mean()

    def greedy_decode(self, features: AMFeatures, alphabet: CtcAlphabet) -> list[str]:
        """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
        best = self.ctc_log_probs(features).argmax(dim=-1)
        return [
            alphabet.decode(collapse_ctc(best[row, :length].tolist()))
            for row, length in enumerate(features.lengths.tolist())
        ]
