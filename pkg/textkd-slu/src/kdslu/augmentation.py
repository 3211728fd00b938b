"""Span masking augmentation for audio tokens and contextualized features.

Every masking axis uses the same mechanism: floor(p * length) distinct
start positions are drawn without replacement and M consecutive
positions are masked from each start, truncated at the sequence end.
Spans may overlap, so p * M is a hard upper bound on the masked fraction.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch

from kdslu.config import DAConfig, MaskSpec
from kdslu.exceptions import AugmentationError, MaskError
from kdslu.speech_encoder import HiddenSequence
from kdslu.tokenizer_vq import TokenSequence
from kdslu.transformer import IdBatch


__all__ = [
    "DA_GRID",
    "AugmentationPolicy",
    "MaskSpec",
    "augmentation_disabled",
    "augmentation_enabled",
    "sample_span_mask",
    "apply_token_mask",
    "apply_time_mask",
    "apply_channel_mask",
    "mask_token_batch",
]


# Tuning ranges: span lengths, and maximum masking ratios p * M per axis.
DA_GRID = {
    "span_lengths": (5, 10),
    "token_ratios": (0.1, 0.2),
    "feature_ratios": (0.1, 0.2, 0.3, 0.4, 0.5),
}

Seed = Union[int, Sequence[int]]

_DISABLED: ContextVar[bool] = ContextVar("kdslu_augmentation_disabled", default=False)


@contextmanager
def augmentation_disabled() -> Iterator[None]:
    """Forbid augmentation inside the block (evaluation paths)."""
    token = _DISABLED.set(True)
    try:
        yield
    finally:
        _DISABLED.reset(token)


def augmentation_enabled() -> bool:
    """Whether the current context permits augmentation."""
    return not _DISABLED.get()


def _require_enabled(operation: str) -> None:
    if _DISABLED.get():
        raise AugmentationError(f"{operation} called while augmentation is disabled")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which masks to apply during one fine-tuning forward pass."""

    token: Optional[MaskSpec] = None
    time: Optional[MaskSpec] = None
    channel: Optional[MaskSpec] = None
    seed: int = 0

    @classmethod
    def from_config(cls, da: DAConfig, seed: int) -> "AugmentationPolicy":
        return cls(token=da.token, time=da.time, channel=da.channel, seed=seed)

    def reseeded(self, seed: int) -> "AugmentationPolicy":
        return AugmentationPolicy(self.token, self.time, self.channel, seed)


def sample_span_mask(length: int, spec: MaskSpec, seed: Seed) -> np.ndarray:
    """
    Draw a span mask over `length` positions.

    Returns:
        Boolean array; deterministic for identical (length, spec, seed).
    """
    if length < 1:
        raise MaskError(f"Cannot mask a sequence of length {length}")
    mask = np.zeros(length, dtype=bool)
    num_starts = spec.num_starts(length)
    if num_starts == 0:
        return mask
    rng = np.random.default_rng(seed)
    starts = rng.choice(length, size=num_starts, replace=False)
    positions = (starts[:, None] + np.arange(spec.M)[None, :]).ravel()
    mask[positions[positions < length]] = True
    return mask


def apply_token_mask(tokens: TokenSequence, mask: np.ndarray) -> TokenSequence:
    """
    Replace masked positions with the MASK token.

    Raises:
        MaskError: If lengths differ or the mask covers a leading CLS.
    """
    _require_enabled("apply_token_mask")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tokens.tokens.shape:
        raise MaskError(f"Mask length {mask.shape[0]} does not match {len(tokens)} tokens")
    if tokens.has_cls and mask[0]:
        raise MaskError("The CLS position cannot be masked")
    masked = tokens.tokens.copy()
    masked[mask] = tokens.specials.mask
    return TokenSequence(masked, tokens.num_codes)


def mask_token_batch(batch: IdBatch, spec: MaskSpec, seed: int, mask_id: int) -> IdBatch:
    """Span-mask each row of a padded id batch; row i uses seed (seed, i)."""
    _require_enabled("mask_token_batch")
    ids, padding = batch
    lengths = (~padding).sum(dim=1).tolist()
    keep = torch.zeros_like(ids, dtype=torch.bool)
    for row, length in enumerate(lengths):
        row_mask = sample_span_mask(int(length), spec, (seed, row))
        keep[row, : int(length)] = torch.from_numpy(row_mask)
    return IdBatch(ids.masked_fill(keep, mask_id), padding)


def apply_time_mask(hidden: HiddenSequence, spec: MaskSpec, seed: int) -> HiddenSequence:
    """
    Zero the state vectors of masked timesteps; CLS is untouched.

    Row i of a batch is masked over its own length with seed (seed, i).
    """
    _require_enabled("apply_time_mask")
    lengths = hidden.lengths.tolist()
    keep = torch.ones(hidden.padding_mask.shape, dtype=hidden.states.dtype, device=hidden.states.device)
    for row, length in enumerate(lengths):
        row_mask = sample_span_mask(int(length), spec, (seed, row))
        keep[row, : int(length)][torch.from_numpy(row_mask)] = 0.0
    return hidden.replace_states(hidden.states * keep[:, :, None])


def apply_channel_mask(hidden: HiddenSequence, spec: MaskSpec, seed: int) -> HiddenSequence:
    """
    Zero masked feature channels at every timestep; CLS is untouched.

    Row i of a batch draws its channel mask with seed (seed, i).
    """
    _require_enabled("apply_channel_mask")
    batch, dim = hidden.states.shape[0], hidden.dim
    keep = torch.ones((batch, dim), dtype=hidden.states.dtype, device=hidden.states.device)
    for row in range(batch):
        row_mask = sample_span_mask(dim, spec, (seed, row))
        keep[row][torch.from_numpy(row_mask)] = 0.0
    return hidden.replace_states(hidden.states * keep[:, None, :])
