"""Pytest configuration and fixtures for textkd-slu tests."""

from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest
import torch
import yaml

from kdslu.config import (
    AMConfig,
    ConvLayerConfig,
    SpeechEncoderConfig,
    TextEncoderConfig,
    load_config,
)

# Small enough for every stage to finish in seconds on a CPU.
TINY_EXPERIMENT = {
    "data": {
        "num_speakers": 6,
        "train_utterances": 48,
        "valid_utterances": 16,
        "test_utterances": 16,
        "num_actions": 2,
        "num_objects": 2,
        "num_locations": 1,
        "num_templates": 2,
        "noise_sigma": 0.05,
        "frames_per_char": 2,
        "duration_jitter": 0,
        "silence_frames": 1,
        "feature_dim": 4,
    },
    "codebook": {"k": 8, "max_iters": 10},
    "speech": {"hidden_dim": 8, "num_layers": 1, "num_heads": 2, "ffn_dim": 16, "max_length": 64},
    "text": {"hidden_dim": 8, "num_layers": 1, "num_heads": 2, "ffn_dim": 16, "max_length": 32},
    "am": {
        "conv_layers": [{"channels": 2, "kernel": [3, 3], "stride": [2, 2]}],
        "rnn_layers": 1,
        "rnn_hidden": 8,
    },
    "training": {
        "teacher": {"max_epochs": 2, "batch_size": 8},
        "mlm": {"max_steps": 4, "batch_size": 8, "schedule": {"total_steps": 4}},
        "pt_kd": {"max_steps": 4, "batch_size": 8, "schedule": {"total_steps": 4}},
        "am_pt": {"max_steps": 4, "batch_size": 8, "eval_every": 2, "schedule": {"total_steps": 4}},
        "ft": {"max_epochs": 2, "batch_size": 8},
        "teacher_min_accuracy": 0.0,
    },
    "ablation": {"seeds": [0, 1], "parts": 4, "max_parts": 1},
    "logging": {"level": "debug"},
}


@pytest.fixture
def tiny_experiment_path(tmp_path) -> Path:
    """YAML file holding the tiny experiment, writing under tmp_path/out."""
    data = dict(TINY_EXPERIMENT)
    data["paths"] = {"out_root": str(tmp_path / "out")}
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture
def tiny_config(tiny_experiment_path):
    """The tiny experiment, loaded through the regular config loader."""
    return load_config(tiny_experiment_path)


@pytest.fixture
def speech_config() -> SpeechEncoderConfig:
    return SpeechEncoderConfig(
        num_codes=8, hidden_dim=8, num_layers=1, num_heads=2, max_length=32, ffn_dim=16
    )


@pytest.fixture
def text_config() -> TextEncoderConfig:
    return TextEncoderConfig(
        vocab_size=31, num_classes=4, hidden_dim=8, num_layers=1, num_heads=2, max_length=32, ffn_dim=16
    )


@pytest.fixture
def am_config() -> AMConfig:
    return AMConfig(
        conv_layers=[ConvLayerConfig(channels=2, kernel=(3, 3), stride=(2, 2))],
        rnn_layers=1,
        rnn_hidden=4,
        input_dim=8,
        num_classes=4,
        alphabet_size=29,
    )


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Sequence[torch.nn.Parameter],
    eps: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-8,
    samples: int = 8,
    seed: int = 0,
) -> float:
    """
    Compare backprop gradients with central differences on sampled coordinates.

    loss_fn must be deterministic and the parameters float64. Returns the
    largest relative error seen; asserts it stays within rtol.
    """
    for p in parameters:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in parameters:
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        for index in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False):
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + eps
                plus = float(loss_fn())
                flat[index] = original - eps
                minus = float(loss_fn())
                flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic[index])
            error = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            if abs(a - numeric) > atol:
                worst = max(worst, error)
    assert worst <= rtol, f"Relative gradient error {worst:.2e} exceeds {rtol:.0e}"
    return worst


@pytest.fixture
def grad_check():
    """Finite-difference gradient checker (see finite_difference_check)."""
    return finite_difference_check
