"""Model checkpoints for textkd-slu.

Saves and restores versioned torch payloads for the speech encoder, the
text teacher and the acoustic model, plus checksums used to verify that
frozen parameter groups stay untouched.
"""

import hashlib
import pickle
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

import torch
import torch.nn as nn

from kdslu.acoustic_model import AcousticModel
from kdslu.config import (
    AMConfig,
    SpeechEncoderConfig,
    TextEncoderConfig,
    config_to_dict,
    dataclass_from_dict,
)
from kdslu.exceptions import CheckpointError
from kdslu.speech_encoder import SpeechEncoder
from kdslu.text_pipeline import TextTeacher, TextVocabulary

CHECKPOINT_VERSION = 1

AM_HEADS = ("intent", "ctc")


@dataclass
class CheckpointPayload:
    """Contents of a checkpoint file."""

    kind: str
    config: dict
    state_dict: dict
    heads: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    created: str = ""
    format_version: int = CHECKPOINT_VERSION


def _payload_to_dict(payload: CheckpointPayload) -> dict:
    """Convert CheckpointPayload to dictionary."""
    return {
        "format_version": payload.format_version,
        "kind": payload.kind,
        "created": payload.created,
        "config": payload.config,
        "heads": list(payload.heads),
        "extra": payload.extra,
        "state_dict": payload.state_dict,
    }


def _dict_to_payload(data: dict) -> CheckpointPayload:
    """Convert dictionary to CheckpointPayload."""
    return CheckpointPayload(
        kind=data["kind"],
        config=data.get("config", {}),
        state_dict=data["state_dict"],
        heads=list(data.get("heads", [])),
        extra=data.get("extra", {}),
        created=data.get("created", ""),
        format_version=data["format_version"],
    )


def compute_file_hash(path: Path) -> str:
    """Compute SHA256 hash of a file."""
    if not path.exists():
        return ""

    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def parameter_checksum(parameters: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the bytes of a sequence of tensors."""
    hasher = hashlib.sha256()
    for tensor in parameters:
        hasher.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return hasher.hexdigest()


def save_checkpoint(path: Path, payload: CheckpointPayload) -> Path:
    """
    Write a checkpoint payload.

    Args:
        path: Destination file; parent directories are created.
        payload: Contents to save.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not payload.created:
        payload.created = datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")
    torch.save(_payload_to_dict(payload), path)
    return path


def load_checkpoint(path: Path, kind: Optional[str] = None) -> CheckpointPayload:
    """
    Read a checkpoint payload.

    Args:
        path: Checkpoint file.
        kind: Expected payload kind, checked when given.

    Raises:
        CheckpointError: If the file is unreadable, of another format
            version, or of the wrong kind.
    """
    try:
        data = torch.load(Path(path), map_location="cpu", weights_only=True)
        payload = _dict_to_payload(data)
    except (OSError, RuntimeError, KeyError, TypeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if payload.format_version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {payload.format_version}, expected {CHECKPOINT_VERSION}"
        )
    if kind is not None and payload.kind != kind:
        raise CheckpointError(f"Checkpoint {path} holds a {payload.kind!r}, expected {kind!r}")
    return payload


def _restore(module: nn.Module, state_dict: dict, path: Path) -> None:
    try:
        module.load_state_dict(state_dict)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its configuration: {e}")


# --- Speech encoder ---


def save_speech_encoder(path: Path, encoder: SpeechEncoder, extra: Optional[dict] = None) -> Path:
    return save_checkpoint(
        path,
        CheckpointPayload(
            kind="speech_encoder",
            config=config_to_dict(encoder.config),
            state_dict=encoder.state_dict(),
            heads=["mlm"],
            extra=extra or {},
        ),
    )


def load_speech_encoder(path: Path) -> tuple[SpeechEncoder, dict]:
    """Restore a speech encoder and the extra metadata saved with it."""
    payload = load_checkpoint(path, "speech_encoder")
    encoder = SpeechEncoder(dataclass_from_dict(SpeechEncoderConfig, payload.config))
    _restore(encoder, payload.state_dict, path)
    return encoder, payload.extra


# --- Text teacher ---


def save_teacher(path: Path, teacher: TextTeacher, extra: Optional[dict] = None) -> Path:
    return save_checkpoint(
        path,
        CheckpointPayload(
            kind="teacher",
            config=config_to_dict(teacher.config),
            state_dict=teacher.state_dict(),
            heads=["intent"],
            extra={"symbols": list(teacher.vocab.symbols), **(extra or {})},
        ),
    )


def load_teacher(path: Path) -> tuple[TextTeacher, dict]:
    """Restore a text teacher; extra carries e.g. its validation accuracy."""
    payload = load_checkpoint(path, "teacher")
    vocab = TextVocabulary(tuple(payload.extra.get("symbols", TextVocabulary().symbols)))
    teacher = TextTeacher(dataclass_from_dict(TextEncoderConfig, payload.config), vocab)
    _restore(teacher, payload.state_dict, path)
    teacher.eval()
    return teacher, payload.extra


# --- Acoustic model ---


def _head_prefix(head: str) -> str:
    return f"{head}_head."


def save_acoustic_model(
    path: Path,
    am: AcousticModel,
    heads: Iterable[str] = AM_HEADS,
    extra: Optional[dict] = None,
) -> Path:
    """
    Save the AM body and the selected heads.

    Args:
        heads: Heads to keep; omitted heads are re-initialized on load.
    """
    heads = list(heads)
    unknown = set(heads) - set(AM_HEADS)
    if unknown:
        raise CheckpointError(f"Unknown acoustic model heads: {', '.join(sorted(unknown))}")
    dropped = [_head_prefix(h) for h in AM_HEADS if h not in heads]
    state = {k: v for k, v in am.state_dict().items() if not any(k.startswith(p) for p in dropped)}
    return save_checkpoint(
        path,
        CheckpointPayload(
            kind="acoustic_model",
            config=config_to_dict(am.config),
            state_dict=state,
            heads=heads,
            extra=extra or {},
        ),
    )


def load_acoustic_model(path: Path, seed: int = 0) -> tuple[AcousticModel, dict]:
    """Restore an acoustic model; heads not in the checkpoint keep a seeded init."""
    payload = load_checkpoint(path, "acoustic_model")
    torch.manual_seed(seed)
    am = AcousticModel(dataclass_from_dict(AMConfig, payload.config))
    missing, unexpected = am.load_state_dict(payload.state_dict, strict=False)
    allowed = tuple(_head_prefix(h) for h in AM_HEADS if h not in payload.heads)
    if unexpected or any(not key.startswith(allowed) for key in missing):
        raise CheckpointError(f"Checkpoint {path} does not match its configuration")
    return am, payload.extra


# --- Complete SLU model ---


def save_slu(path: Path, encoder: SpeechEncoder, am: AcousticModel, extra: Optional[dict] = None) -> Path:
    return save_checkpoint(
        path,
        CheckpointPayload(
            kind="slu",
            config={"speech": config_to_dict(encoder.config), "am": config_to_dict(am.config)},
            state_dict={"speech": encoder.state_dict(), "am": am.state_dict()},
            heads=list(AM_HEADS),
            extra=extra or {},
        ),
    )


def load_slu(path: Path) -> tuple[SpeechEncoder, AcousticModel, dict]:
    """Restore the speech encoder and acoustic model of a fine-tuned system."""
    payload = load_checkpoint(path, "slu")
    encoder = SpeechEncoder(dataclass_from_dict(SpeechEncoderConfig, payload.config["speech"]))
    am = AcousticModel(dataclass_from_dict(AMConfig, payload.config["am"]))
    _restore(encoder, payload.state_dict["speech"], path)
    _restore(am, payload.state_dict["am"], path)
    return encoder, am, payload.extra
