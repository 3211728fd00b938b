"""Configuration loading and validation for textkd-slu."""

import hashlib
import math
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from kdslu.exceptions import ConfigError, ConfigNotFoundError, ConfigValidationError


# Reserved ids appended after the K codebook entries: PAD, CLS, MASK.
NUM_SPEECH_SPECIALS = 3

PARAMETER_GROUPS = ("quantizer_codebook", "speech_encoder", "teacher", "am", "heads")

OUT_ROOT_ENV = "KDSLU_OUT"


# --- Sub-configuration dataclasses ---


@dataclass(frozen=True)
class MaskSpec:
    """Span masking parameters for one axis.

    p is the fraction of positions chosen as span starts and M the span
    length, so p * M is the largest fraction of positions that can be masked.
    """

    p: float = 0.0
    M: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigValidationError("mask.p", f"Must be in [0, 1], got {self.p}")
        if int(self.M) != self.M or self.M < 1:
            raise ConfigValidationError("mask.M", f"Must be an integer >= 1, got {self.M}")

    @property
    def max_ratio(self) -> float:
        """Hard upper bound on the masked fraction."""
        return self.p * self.M

    @classmethod
    def from_ratio(cls, max_ratio: float, M: int) -> "MaskSpec":
        """Build a spec from its maximum masking ratio p * M."""
        return cls(p=max_ratio / M, M=M)

    def num_starts(self, length: int) -> int:
        """Number of distinct span starts drawn for a sequence of this length."""
        # Tolerance keeps e.g. 0.29 * 100 from flooring to 28.
        return int(math.floor(self.p * length + 1e-9))


@dataclass
class SynthConfig:
    """Synthetic corpus generation."""

    num_speakers: int = 20
    train_utterances: int = 960
    valid_utterances: int = 120
    test_utterances: int = 240
    num_actions: int = 4
    num_objects: int = 3
    num_locations: int = 2
    num_templates: int = 3
    noise_sigma: float = 0.1
    speaker_scale: float = 0.5
    reverb_decay: float = 0.0
    frames_per_char: int = 6
    duration_jitter: int = 1
    silence_frames: int = 2
    feature_dim: int = 16
    signal_format: str = "frames"  # "frames" or "waveform"
    sample_rate: int = 16000
    frame_ms: float = 10.0
    seed: int = 0


@dataclass
class CodebookConfig:
    """k-means quantizer configuration."""

    k: int = 64
    max_iters: int = 100
    seed: int = 0


@dataclass
class SpeechEncoderConfig:
    """Transformer over discrete audio tokens."""

    num_codes: int = 64
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    max_length: int = 256
    ffn_dim: int = 64
    dropout: float = 0.0

    @property
    def vocab_size(self) -> int:
        return self.num_codes + NUM_SPEECH_SPECIALS


@dataclass
class TextEncoderConfig:
    """Character-level text teacher."""

    vocab_size: int = 31
    num_classes: int = 24
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    max_length: int = 128
    ffn_dim: int = 64
    dropout: float = 0.0


@dataclass
class ConvLayerConfig:
    """One 2D convolution over the time x feature plane."""

    channels: int = 4
    kernel: tuple[int, int] = (5, 3)
    stride: tuple[int, int] = (2, 2)


def _default_conv_layers() -> list[ConvLayerConfig]:
    return [
        ConvLayerConfig(channels=4, kernel=(5, 3), stride=(2, 2)),
        ConvLayerConfig(channels=4, kernel=(3, 3), stride=(2, 1)),
    ]


@dataclass
class AMConfig:
    """Convolutional-recurrent acoustic model."""

    conv_layers: list[ConvLayerConfig] = field(default_factory=_default_conv_layers)
    rnn_layers: int = 2
    rnn_hidden: int = 32
    input_dim: int = 32
    num_classes: int = 24
    alphabet_size: int = 29


@dataclass
class ScheduleConfig:
    """Learning-rate schedule."""

    kind: str = "linear"  # "linear", "anneal" or "constant"
    lr: float = 1e-3
    total_steps: int = 2000
    gamma: float = 1.05


@dataclass
class StageConfig:
    """One training stage: schedule, loss weights, freezing and stopping."""

    stage: str = "ft"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: str = "adam"  # "adam" or "sgd"
    loss_weights: dict[str, float] = field(default_factory=dict)
    freeze: list[str] = field(default_factory=list)
    max_steps: int = 2000
    max_epochs: int = 40
    patience: int = 3
    smoothing_window: int = 50
    batch_size: int = 16
    eval_every: int = 100
    augment: bool = False
    seed: int = 0


def _teacher_stage() -> StageConfig:
    return StageConfig(
        stage="teacher",
        schedule=ScheduleConfig(kind="anneal", lr=1e-3, gamma=1.0),
        loss_weights={"ce": 1.0},
        freeze=["quantizer_codebook", "speech_encoder", "am", "heads"],
        max_epochs=30,
        batch_size=16,
    )


def _mlm_stage() -> StageConfig:
    return StageConfig(
        stage="mlm",
        schedule=ScheduleConfig(kind="linear", lr=1e-3, total_steps=2000),
        loss_weights={"mlm": 1.0, "kd": 0.0},
        freeze=["quantizer_codebook", "teacher", "am", "heads"],
        max_steps=2000,
        batch_size=16,
    )


def _pt_kd_stage() -> StageConfig:
    return StageConfig(
        stage="pt_kd",
        schedule=ScheduleConfig(kind="linear", lr=5e-4, total_steps=2000),
        loss_weights={"mlm": 1.0, "kd": 1.0},
        freeze=["quantizer_codebook", "teacher", "am", "heads"],
        max_steps=2000,
        batch_size=16,
    )


def _am_pt_stage() -> StageConfig:
    return StageConfig(
        stage="am_pt",
        schedule=ScheduleConfig(kind="linear", lr=2e-3, total_steps=2000),
        loss_weights={"ctc": 1.0},
        freeze=["quantizer_codebook", "speech_encoder", "teacher"],
        max_steps=2000,
        batch_size=16,
        eval_every=100,
    )


def _ft_stage() -> StageConfig:
    return StageConfig(
        stage="ft",
        schedule=ScheduleConfig(kind="anneal", lr=1e-3, gamma=1.05),
        loss_weights={"ce": 1.0, "kd": 1.0},
        freeze=["quantizer_codebook", "speech_encoder", "teacher"],
        max_epochs=40,
        batch_size=16,
        augment=True,
    )


@dataclass
class TrainingConfig:
    """All training stages."""

    teacher: StageConfig = field(default_factory=_teacher_stage)
    mlm: StageConfig = field(default_factory=_mlm_stage)
    pt_kd: StageConfig = field(default_factory=_pt_kd_stage)
    am_pt: StageConfig = field(default_factory=_am_pt_stage)
    ft: StageConfig = field(default_factory=_ft_stage)
    mlm_mask: MaskSpec = field(default_factory=lambda: MaskSpec(p=0.05, M=10))
    teacher_min_accuracy: float = 0.95


@dataclass
class DAConfig:
    """Masking augmentation applied during fine-tuning."""

    token: MaskSpec = field(default_factory=lambda: MaskSpec.from_ratio(0.1, 5))
    time: MaskSpec = field(default_factory=lambda: MaskSpec.from_ratio(0.2, 5))
    channel: MaskSpec = field(default_factory=lambda: MaskSpec.from_ratio(0.2, 5))


@dataclass
class AblationConfig:
    """Cumulative method-stack ablation."""

    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    parts: int = 10
    max_parts: int = 1
    low_resource: bool = True


@dataclass
class LoggingConfig:
    """Logging configuration."""

    level: str = "routine"  # debug, routine, important, critical
    console: bool = True


@dataclass
class PathsConfig:
    """Output locations."""

    out_root: str = "runs"


# --- Main configuration dataclass ---


@dataclass
class Config:
    """Complete experiment configuration."""

    data: SynthConfig = field(default_factory=SynthConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    speech: SpeechEncoderConfig = field(default_factory=SpeechEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    am: AMConfig = field(default_factory=AMConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    da: DAConfig = field(default_factory=DAConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


# --- Presets ---


PRESETS: dict[str, dict] = {
    "toy": {},
    "paper": {
        "data": {"num_actions": 6, "num_objects": 14, "num_locations": 4},
        "speech": {
            "hidden_dim": 768, "num_layers": 12, "num_heads": 12,
            "ffn_dim": 3072, "max_length": 512,
        },
        "text": {
            "hidden_dim": 768, "num_layers": 12, "num_heads": 12,
            "ffn_dim": 3072, "max_length": 512,
        },
        "am": {
            "conv_layers": [
                {"channels": 32, "kernel": [41, 11], "stride": [2, 2]},
                {"channels": 32, "kernel": [21, 11], "stride": [2, 1]},
            ],
            "rnn_layers": 5,
            "rnn_hidden": 768,
        },
        "training": {
            "pt_kd": {
                "schedule": {"kind": "linear", "lr": 1e-6, "total_steps": 250000},
                "max_steps": 250000,
                "batch_size": 256,
            },
            "ft": {
                "schedule": {"kind": "anneal", "lr": 1e-4, "gamma": 1.01},
                "max_epochs": 200,
            },
        },
    },
    "fsc": {
        "data": {"num_actions": 6, "num_objects": 14, "num_locations": 4, "num_templates": 4},
    },
    "far_field": {
        "data": {"noise_sigma": 0.6, "reverb_decay": 0.6},
    },
}


# --- Configuration loading functions ---


def _merge_dict(base: dict, override: dict) -> dict:
    """Recursively merge override dict into base dict."""
    result = base.copy()
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _merge_dict(result[key], value)
        else:
            result[key] = value
    return result


def _convert_value(field_type: Any, value: Any) -> Any:
    """Convert a loaded YAML value to the declared field type."""
    origin = typing.get_origin(field_type)
    args = typing.get_args(field_type)

    if is_dataclass(field_type) and isinstance(value, dict):
        return _dict_to_dataclass(field_type, value)
    if origin is list and args and is_dataclass(args[0]) and isinstance(value, list):
        return [_convert_value(args[0], item) for item in value]
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if origin is dict and isinstance(value, dict):
        return dict(value)
    return value


def _dict_to_dataclass(cls: type, data: Optional[dict]) -> Any:
    """Convert a dictionary to a dataclass, handling nested dataclasses."""
    if data is None:
        return cls()

    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        kwargs[f.name] = _convert_value(hints[f.name], data[f.name])

    return cls(**kwargs)


def dataclass_from_dict(cls: type, data: Optional[dict]) -> Any:
    """Build a config section dataclass from plain data (e.g. a checkpoint)."""
    return _dict_to_dataclass(cls, data)


def config_to_dict(obj: Any) -> Any:
    """Convert a (nested) config dataclass to plain YAML-safe data."""
    if is_dataclass(obj):
        return {f.name: config_to_dict(getattr(obj, f.name)) for f in fields(obj)}
    elif isinstance(obj, (list, tuple)):
        return [config_to_dict(item) for item in obj]
    elif isinstance(obj, dict):
        return {k: config_to_dict(v) for k, v in obj.items()}
    else:
        return obj


def _load_yaml_file(path: Path) -> dict:
    """Load a YAML file and return its contents as a dictionary."""
    if not path.exists():
        raise ConfigNotFoundError(str(path))

    try:
        with open(path) as f:
            content = yaml.safe_load(f)
            return content if content else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}")


# Schedule fields that may also be given directly on a stage, e.g. training.ft.gamma.
SCHEDULE_SHORTHANDS = ("kind", "lr", "total_steps", "gamma")


def canonical_key(dotted: str) -> str:
    """Map a stage-level schedule shorthand to its schedule path."""
    parts = dotted.split(".")
    if len(parts) == 3 and parts[0] == "training" and parts[2] in SCHEDULE_SHORTHANDS:
        return f"training.{parts[1]}.schedule.{parts[2]}"
    return dotted


def _hoist_schedule_shorthands(data: dict) -> dict:
    """Move stage-level schedule shorthands in file data under `schedule`."""
    training = data.get("training")
    if not isinstance(training, dict):
        return data
    hoisted = {}
    for name, stage in training.items():
        if isinstance(stage, dict) and any(key in stage for key in SCHEDULE_SHORTHANDS):
            stage = dict(stage)
            schedule = dict(stage.get("schedule") or {})
            for key in SCHEDULE_SHORTHANDS:
                if key in stage:
                    schedule[key] = stage.pop(key)
            stage["schedule"] = schedule
        hoisted[name] = stage
    return {**data, "training": hoisted}


def _lookup(tree: dict, dotted: str) -> bool:
    """Check whether a dotted key names a known configuration field."""
    node: Any = tree
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def _set_dotted(tree: dict, dotted: str, value: Any) -> dict:
    """Return a nested override dict setting one dotted key."""
    override: dict = {}
    node = override
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return _merge_dict(tree, override)


def apply_overrides(data: dict, overrides: list[tuple[str, str]]) -> dict:
    """Apply dotted-path overrides such as ("training.ft.schedule.gamma", "1.05").

    Values are parsed as YAML scalars or lists. Keys that do not exist in
    the default configuration are rejected; stage loss weights are open maps
    and accept new keys. Schedule fields may be addressed on the stage
    itself (training.ft.gamma).
    """
    known = _merge_dict(config_to_dict(Config()), data)
    for key, raw in overrides:
        key = canonical_key(key)
        parent = key.rsplit(".", 1)[0]
        is_weight = parent.endswith(".loss_weights")
        if not _lookup(known, key) and not (is_weight and _lookup(known, parent)):
            raise ConfigValidationError(key, "Unknown configuration key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigValidationError(key, f"Unparseable value {raw!r}: {e}")
        data = _set_dotted(data, key, value)
        known = _set_dotted(known, key, value)
    return data


def _validate_transformer(prefix: str, hidden: int, heads: int, layers: int, max_length: int) -> None:
    if heads < 1 or hidden % heads != 0:
        raise ConfigValidationError(f"{prefix}.num_heads", "hidden_dim must be divisible by num_heads")
    if layers < 1:
        raise ConfigValidationError(f"{prefix}.num_layers", "Must be at least 1")
    if max_length < 2:
        raise ConfigValidationError(f"{prefix}.max_length", "Must be at least 2 (CLS + one token)")


def _validate_stage(name: str, stage: StageConfig) -> None:
    valid_kinds = {"linear", "anneal", "constant"}
    if stage.schedule.kind not in valid_kinds:
        raise ConfigValidationError(
            f"training.{name}.schedule.kind", f"Must be one of: {', '.join(sorted(valid_kinds))}"
        )
    if stage.schedule.lr < 0:
        raise ConfigValidationError(f"training.{name}.schedule.lr", "Must be non-negative")
    if stage.schedule.gamma < 1.0:
        raise ConfigValidationError(f"training.{name}.schedule.gamma", "Must be >= 1")
    if stage.schedule.kind == "linear" and stage.schedule.total_steps < 1:
        raise ConfigValidationError(f"training.{name}.schedule.total_steps", "Must be positive")
    if stage.optimizer not in {"adam", "sgd"}:
        raise ConfigValidationError(f"training.{name}.optimizer", "Must be 'adam' or 'sgd'")
    for term, weight in stage.loss_weights.items():
        if weight < 0:
            raise ConfigValidationError(f"training.{name}.loss_weights.{term}", "Must be non-negative")
    for group in stage.freeze:
        if group not in PARAMETER_GROUPS:
            raise ConfigValidationError(
                f"training.{name}.freeze", f"Unknown parameter group '{group}'"
            )
    if stage.patience < 1:
        raise ConfigValidationError(f"training.{name}.patience", "Must be at least 1")
    if stage.batch_size < 1:
        raise ConfigValidationError(f"training.{name}.batch_size", "Must be at least 1")
    if stage.smoothing_window < 1:
        raise ConfigValidationError(f"training.{name}.smoothing_window", "Must be at least 1")


def _validate_config(config: Config) -> None:
    """Validate configuration values."""
    data = config.data
    if data.noise_sigma < 0:
        raise ConfigValidationError("data.noise_sigma", "Must be non-negative")
    if data.num_speakers < 3:
        raise ConfigValidationError("data.num_speakers", "Speaker-disjoint splits need at least 3")
    if min(data.num_actions, data.num_objects, data.num_locations) < 1:
        raise ConfigValidationError("data.num_actions", "Label cardinalities must be positive")
    if data.signal_format not in {"frames", "waveform"}:
        raise ConfigValidationError("data.signal_format", "Must be 'frames' or 'waveform'")
    if data.frames_per_char - data.duration_jitter < 1:
        raise ConfigValidationError("data.duration_jitter", "Must leave at least one frame per char")
    if not 0.0 <= data.reverb_decay < 1.0:
        raise ConfigValidationError("data.reverb_decay", "Must be in [0, 1)")

    if config.codebook.k < 2:
        raise ConfigValidationError("codebook.k", "Must be at least 2")
    if config.codebook.max_iters < 1:
        raise ConfigValidationError("codebook.max_iters", "Must be at least 1")

    speech = config.speech
    _validate_transformer("speech", speech.hidden_dim, speech.num_heads, speech.num_layers, speech.max_length)
    text = config.text
    _validate_transformer("text", text.hidden_dim, text.num_heads, text.num_layers, text.max_length)

    if not config.am.conv_layers:
        raise ConfigValidationError("am.conv_layers", "At least one convolution is required")
    for i, conv in enumerate(config.am.conv_layers):
        if min(conv.stride) < 1:
            raise ConfigValidationError(f"am.conv_layers.{i}.stride", "Strides must be >= 1")
        if min(conv.kernel) < 1 or conv.channels < 1:
            raise ConfigValidationError(f"am.conv_layers.{i}", "Kernel and channels must be positive")
    if config.am.rnn_hidden <= 0:
        raise ConfigValidationError("am.rnn_hidden", "Must be positive")
    if config.am.rnn_layers < 1:
        raise ConfigValidationError("am.rnn_layers", "Must be at least 1")

    for name in ("teacher", "mlm", "pt_kd", "am_pt", "ft"):
        _validate_stage(name, getattr(config.training, name))
    if not 0.0 <= config.training.teacher_min_accuracy <= 1.0:
        raise ConfigValidationError("training.teacher_min_accuracy", "Must be in [0, 1]")

    if config.ablation.parts < 2:
        raise ConfigValidationError("ablation.parts", "Must be at least 2")
    if not config.ablation.seeds:
        raise ConfigValidationError("ablation.seeds", "At least one seed is required")

    valid_levels = {"critical", "important", "routine", "debug"}
    if config.logging.level not in valid_levels:
        raise ConfigValidationError(
            "logging.level", f"Must be one of: {', '.join(sorted(valid_levels))}"
        )


def load_config(
    path: Optional[Path] = None,
    preset: str = "toy",
    overrides: Optional[list[tuple[str, str]]] = None,
) -> Config:
    """
    Load configuration from a YAML file, a named preset and dotted overrides.

    Args:
        path: Path to the experiment YAML file. Defaults are used when None.
        preset: Name of a preset in PRESETS, applied beneath the file.
        overrides: Dotted-path (key, value) pairs applied last.

    Returns:
        Loaded and validated Config object.

    Raises:
        ConfigError: If configuration is invalid.
        ConfigNotFoundError: If the given file does not exist.
    """
    if preset not in PRESETS:
        raise ConfigValidationError("preset", f"Must be one of: {', '.join(PRESETS)}")

    config_data = dict(PRESETS[preset])
    if path is not None:
        file_data = _hoist_schedule_shorthands(_load_yaml_file(Path(path)))
        config_data = _merge_dict(config_data, file_data)
    if overrides:
        config_data = apply_overrides(config_data, overrides)

    # Partial sections merge over the full defaults so stage-specific
    # defaults (freeze sets, loss weights) survive.
    try:
        config = _dict_to_dataclass(Config, _merge_dict(config_to_dict(Config()), config_data))
    except TypeError as e:
        raise ConfigError(f"Invalid configuration structure: {e}")

    if "out_root" not in (config_data.get("paths") or {}):
        env_root = os.environ.get(OUT_ROOT_ENV)
        if env_root:
            config.paths.out_root = env_root

    _validate_config(config)

    return config


def get_default_config() -> Config:
    """Return a Config object with all default values."""
    return Config()


def dump_config(config: Config) -> str:
    """Render the resolved configuration as canonical YAML."""
    return yaml.safe_dump(config_to_dict(config), default_flow_style=False, sort_keys=True)


def config_hash(config: Config) -> str:
    """Short stable hash of the resolved configuration."""
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()[:12]


def save_config(config: Config, path: Path) -> None:
    """
    Save the resolved configuration as YAML.

    Args:
        config: Config object to save.
        path: Destination file.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(dump_config(config))
