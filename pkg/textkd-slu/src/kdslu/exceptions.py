"""Custom exceptions for textkd-slu."""


class KdSluError(Exception):
    """Base exception for all textkd-slu errors."""

    pass


class ConfigError(KdSluError):
    """Error loading or validating configuration."""

    pass


class ConfigNotFoundError(ConfigError):
    """Configuration file not found."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"Configuration file not found: {path}")


class ConfigValidationError(ConfigError):
    """Configuration validation failed."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"Invalid configuration for '{field}': {message}")


class EmptyInputError(KdSluError):
    """Input is too short to produce a single frame or token."""

    pass


class DegenerateCorpusError(KdSluError):
    """Corpus has fewer distinct frames than requested centroids."""

    pass


class ShapeError(KdSluError):
    """Array dimensions do not match."""

    pass


class VocabError(KdSluError):
    """Token id outside the model vocabulary."""

    pass


class LengthError(KdSluError):
    """Sequence is too long or too short for the model."""

    pass


class NoMaskedPositionsError(KdSluError):
    """Masked language modeling needs at least one masked position."""

    pass


class LabelError(KdSluError):
    """Intent label outside the label space."""

    pass


class InfeasibleAlignmentError(KdSluError):
    """Transcript cannot be aligned to the available frames."""

    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(
            f"CTC alignment needs at least {required} frames, got {available}"
        )


class MaskError(KdSluError):
    """Mask does not fit the sequence it is applied to."""

    pass


class AugmentationError(KdSluError):
    """Augmentation invoked where it is disabled."""

    pass


class PairingError(KdSluError):
    """Speech/text pairing is missing or inconsistent."""

    pass


class TeacherQualityError(KdSluError):
    """Text teacher is not accurate enough to supervise the student."""

    def __init__(self, accuracy: float, threshold: float):
        self.accuracy = accuracy
        self.threshold = threshold
        super().__init__(
            f"Teacher validation accuracy {accuracy:.3f} is below the required {threshold:.3f}"
        )


class ParseError(KdSluError):
    """Malformed line in a manifest or codebook file."""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class MissingArtifactError(KdSluError):
    """An upstream artifact required by a stage does not exist."""

    def __init__(self, name: str, path: str):
        self.name = name
        self.path = path
        super().__init__(f"Missing required artifact '{name}' (expected at {path})")


class CheckpointError(KdSluError):
    """Checkpoint file is invalid or of the wrong kind."""

    pass


class RunLockedError(KdSluError):
    """Another process holds the run directory lock."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"Run directory is locked: {path}")
