"""Model bundle: the components of one SLU system and their parameter groups.

Parameter groups are the unit of freezing:

    quantizer_codebook  k-means centroids (never trained by gradient)
    speech_encoder      audio-token BERT incl. its MLM head
    teacher             text teacher incl. its classifier
    am                  acoustic model convolutions and LSTM
    heads               intent and CTC heads of the acoustic model
"""

from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch
import torch.nn as nn

from kdslu.acoustic_model import AcousticModel, AMFeatures
from kdslu.augmentation import (
    AugmentationPolicy,
    apply_channel_mask,
    apply_time_mask,
    augmentation_disabled,
    mask_token_batch,
)
from kdslu.checkpoint import parameter_checksum
from kdslu.config import PARAMETER_GROUPS
from kdslu.exceptions import ConfigValidationError
from kdslu.speech_encoder import SpeechEncoder
from kdslu.text_pipeline import TextTeacher
from kdslu.tokenizer_vq import Codebook
from kdslu.transformer import IdBatch


class SLUModel(nn.Module):
    """Speech encoder followed by the acoustic model's intent head."""

    def __init__(self, encoder: SpeechEncoder, am: AcousticModel):
        super().__init__()
        self.encoder = encoder
        self.am = am

    def features(self, batch: IdBatch, policy: Optional[AugmentationPolicy] = None) -> AMFeatures:
        """
        Acoustic-model features for a batch of audio tokens.

        With a policy, masks are applied in order: token spans before the
        encoder, then time and channel spans on its states.
        """
        if policy is not None and policy.token is not None:
            batch = mask_token_batch(batch, policy.token, policy.seed, self.encoder.specials.mask)
        hidden = self.encoder(batch)
        if policy is not None and policy.time is not None:
            hidden = apply_time_mask(hidden, policy.time, policy.seed + 1)
        if policy is not None and policy.channel is not None:
            hidden = apply_channel_mask(hidden, policy.channel, policy.seed + 2)
        return self.am(hidden)

    def forward(self, batch: IdBatch, policy: Optional[AugmentationPolicy] = None) -> torch.Tensor:
        """Intent logits for a batch of audio tokens."""
        return self.am.intent_logits(self.features(batch, policy))

    def predict(self, batch: IdBatch) -> torch.Tensor:
        """Predicted class per row, without augmentation or gradients."""
        self.eval()
        with augmentation_disabled(), torch.no_grad():
            return self(batch).argmax(dim=-1)


def kd_adapter(speech_dim: int, teacher_dim: int, seed: int = 0) -> Optional[torch.Tensor]:
    """Fixed random projection from speech to teacher width; None when equal."""
    if speech_dim == teacher_dim:
        return None
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(speech_dim, teacher_dim, generator=generator) / speech_dim**0.5


@dataclass
class ModelBundle:
    """Codebook, speech encoder, optional teacher and acoustic model."""

    codebook: Codebook
    speech: SpeechEncoder
    am: AcousticModel
    teacher: Optional[TextTeacher] = None
    frozen: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.slu = SLUModel(self.speech, self.am)
        speech_dim = self.speech.config.hidden_dim
        teacher_dim = self.teacher.config.hidden_dim if self.teacher is not None else speech_dim
        self.adapter = kd_adapter(speech_dim, teacher_dim)

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        """
        Parameters of one group.

        Raises:
            ConfigValidationError: If the group name is unknown.
        """
        if group not in PARAMETER_GROUPS:
            raise ConfigValidationError("freeze", f"Unknown parameter group '{group}'")
        if group == "quantizer_codebook":
            return []
        if group == "speech_encoder":
            return list(self.speech.parameters())
        if group == "teacher":
            return list(self.teacher.parameters()) if self.teacher is not None else []
        modules = self.am.body_modules() if group == "am" else self.am.head_modules()
        return [p for module in modules for p in module.parameters()]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [
            p for group in PARAMETER_GROUPS if group not in self.frozen
            for p in self.group_parameters(group)
        ]

    def checksums(self) -> dict[str, str]:
        """SHA-256 per parameter group; the codebook hashes its centroids."""
        sums = {group: parameter_checksum(self.group_parameters(group)) for group in PARAMETER_GROUPS}
        sums["quantizer_codebook"] = self.codebook.checksum()
        return sums


def freeze(bundle: ModelBundle, groups: Iterable[str]) -> None:
    """Stop gradient updates for the named groups; repeated calls accumulate."""
    for group in groups:
        for p in bundle.group_parameters(group):
            p.requires_grad_(False)
        bundle.frozen.add(group)


def unfreeze(bundle: ModelBundle, groups: Iterable[str]) -> None:
    """Re-enable gradient updates for the named groups."""
    for group in groups:
        for p in bundle.group_parameters(group):
            p.requires_grad_(True)
        bundle.frozen.discard(group)


def set_frozen(bundle: ModelBundle, groups: Iterable[str]) -> None:
    """Make exactly the named groups frozen."""
    groups = set(groups)
    unfreeze(bundle, [g for g in PARAMETER_GROUPS if g not in groups])
    freeze(bundle, groups)
