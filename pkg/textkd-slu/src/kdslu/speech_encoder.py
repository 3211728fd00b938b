"""BERT-style encoder over discrete audio tokens.

Produces a CLS summary vector and one contextualized state per input
token, and carries the masked-language-model head used during
pre-training.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from kdslu.config import SpeechEncoderConfig
from kdslu.exceptions import (
    LengthError,
    MaskError,
    NoMaskedPositionsError,
    ShapeError,
    VocabError,
)
from kdslu.tokenizer_vq import TokenSequence, special_ids
from kdslu.transformer import EncoderBackbone, IdBatch, pad_sequences


@dataclass
class HiddenSequence:
    """Contextualized states of a (padded) batch of token sequences."""

    cls: torch.Tensor  # (B, D)
    states: torch.Tensor  # (B, T, D), CLS excluded
    padding_mask: torch.Tensor  # (B, T), True where padded

    def __post_init__(self):
        if self.states.dim() != 3 or self.cls.dim() != 2:
            raise ShapeError("HiddenSequence expects cls (B, D) and states (B, T, D)")
        if self.padding_mask.shape != self.states.shape[:2]:
            raise ShapeError("padding_mask must match the (B, T) prefix of states")

    @property
    def lengths(self) -> torch.Tensor:
        return (~self.padding_mask).sum(dim=1)

    @property
    def dim(self) -> int:
        return int(self.states.shape[-1])

    def replace_states(self, states: torch.Tensor) -> "HiddenSequence":
        return HiddenSequence(self.cls, states, self.padding_mask)


TokenInput = Union[TokenSequence, IdBatch]


class SpeechEncoder(nn.Module):
    """Transformer over audio codes with a CLS token and an MLM head."""

    def __init__(self, config: SpeechEncoderConfig):
        super().__init__()
        self.config = config
        self.specials = special_ids(config.num_codes)
        self.backbone = EncoderBackbone(
            vocab_size=config.vocab_size,
            hidden_dim=config.hidden_dim,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            ffn_dim=config.ffn_dim,
            max_length=config.max_length,
            dropout=config.dropout,
        )
        self.mlm_head = nn.Linear(config.hidden_dim, config.num_codes)

    @staticmethod
    def expected_parameter_count(config: SpeechEncoderConfig) -> int:
        """Closed-form parameter count for a configuration."""
        backbone = EncoderBackbone.parameter_count(
            config.vocab_size, config.hidden_dim, config.num_layers, config.ffn_dim, config.max_length
        )
        return backbone + config.hidden_dim * config.num_codes + config.num_codes

    # --- input handling ---

    def collate(self, sequences: list[TokenSequence]) -> IdBatch:
        """Pad token sequences (CLS stripped) into a batch."""
        tensors = []
        for seq in sequences:
            if seq.num_codes != self.config.num_codes:
                raise VocabError(
                    f"Sequence uses {seq.num_codes} codes, encoder expects {self.config.num_codes}"
                )
            tensors.append(torch.as_tensor(seq.without_cls().tokens, dtype=torch.long))
        return pad_sequences(tensors, self.specials.pad)

    def _as_batch(self, tokens: TokenInput) -> IdBatch:
        if isinstance(tokens, TokenSequence):
            return self.collate([tokens])
        return tokens

    def _check_batch(self, batch: IdBatch) -> None:
        ids, padding = batch
        if ids.dim() != 2 or padding.shape != ids.shape:
            raise ShapeError("Expected (B, T) ids with a matching padding mask")
        if ids.shape[1] > self.config.max_length - 1:
            raise LengthError(
                f"Sequence of {ids.shape[1]} tokens exceeds the limit of {self.config.max_length - 1}"
            )
        valid = ids[~padding]
        if valid.numel() and (valid.min() < 0 or valid.max() >= self.config.vocab_size):
            raise VocabError(f"Token ids must lie in [0, {self.config.vocab_size})")
        if valid.numel() and bool((valid == self.specials.cls).any()):
            raise VocabError("CLS is prepended by the encoder and may not appear in the input")

    # --- forward passes ---

    def forward(self, tokens: TokenInput) -> HiddenSequence:
        """
        Prepend CLS and encode.

        Raises:
            VocabError: If a token id is outside the vocabulary.
            LengthError: If the sequence exceeds max_length - 1 tokens.
        """
        batch = self._as_batch(tokens)
        self._check_batch(batch)
        ids, padding = batch
        cls_column = torch.full((ids.shape[0], 1), self.specials.cls, dtype=torch.long, device=ids.device)
        full_ids = torch.cat([cls_column, ids], dim=1)
        full_padding = torch.cat([torch.zeros_like(padding[:, :1]), padding], dim=1)
        states = self.backbone(full_ids, full_padding)
        return HiddenSequence(cls=states[:, 0], states=states[:, 1:], padding_mask=padding)

    def cls_representation(self, tokens: TokenInput) -> torch.Tensor:
        """The CLS vector of forward(tokens); (D,) for one sequence, (B, D) for a batch."""
        cls = self(tokens).cls
        return cls[0] if isinstance(tokens, TokenSequence) else cls

    def mlm_loss(
        self,
        tokens: TokenInput,
        mask: Union[np.ndarray, torch.Tensor],
        rng_seed: Optional[int] = None,
    ) -> torch.Tensor:
        """
        Masked-language-model loss.

        Masked positions are replaced by the MASK token; the loss is the
        cross-entropy of predicting the original codes, averaged over masked
        positions only. With rng_seed, dropout in the forward pass draws
        from a generator seeded with it and the global torch RNG is left
        untouched.

        Raises:
            NoMaskedPositionsError: If the mask selects no position.
            MaskError: If the mask shape differs from the tokens or covers padding.
        """
        ids, padding = self._as_batch(tokens)
        mask = torch.as_tensor(mask, dtype=torch.bool, device=ids.device)
        if isinstance(tokens, TokenSequence) and tokens.has_cls:
            if mask.shape[-1] != len(tokens) or bool(mask[..., 0].any()):
                raise MaskError("Mask must match the sequence and leave CLS unmasked")
            mask = mask[..., 1:]
        if mask.dim() == 1:
            mask = mask[None, :]
        if mask.shape != ids.shape:
            raise MaskError(f"Mask shape {tuple(mask.shape)} does not match tokens {tuple(ids.shape)}")
        if bool((mask & padding).any()):
            raise MaskError("Mask covers padded positions")
        if not bool(mask.any()):
            raise NoMaskedPositionsError("MLM loss needs at least one masked position")
        targets = ids[mask]
        if bool((targets >= self.config.num_codes).any()):
            raise VocabError("Masked positions must hold audio codes")

        corrupted = ids.masked_fill(mask, self.specials.mask)
        if rng_seed is None:
            hidden = self(IdBatch(corrupted, padding))
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(rng_seed)
                hidden = self(IdBatch(corrupted, padding))
        logits = self.mlm_head(hidden.states[mask])
        return F.cross_entropy(logits, targets)
