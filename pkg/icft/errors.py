################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

(c) 2025 Stanley Solutions
"""
################################################################################


class IcftError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(IcftError, ValueError):
    """Tensor shapes or widths do not agree."""


class TargetIndexError(IcftError, IndexError):
    """A class or token index falls outside the vocabulary."""


class ConfigError(IcftError):
    """A configuration file or value is invalid."""


class CorpusError(IcftError):
    """A corpus file could not be parsed or validated."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TokenizationError(IcftError, ValueError):
    """Text produced no tokens."""


class VocabularyMismatchError(IcftError):
    """Data or checkpoint disagree with the vocabulary in use."""


class CheckpointError(IcftError):
    """A checkpoint file is unreadable, truncated or incompatible."""


class MemoryEmptyError(IcftError):
    """Retrieval was requested while both memory stores are empty."""


class MemoryLookupError(IcftError, KeyError):
    """An expected memory item is not present in the store."""


class LoraError(IcftError):
    """A LoRA patch targets an unknown matrix or was merged twice."""


class CurriculumError(IcftError):
    """The curriculum cannot be built from the given corpus."""


class OptimizerError(IcftError):
    """An active parameter has no gradient at update time."""


class EmptyBatchError(IcftError, ValueError):
    """A loss was requested over an empty batch."""


class MetricError(IcftError, ValueError):
    """A metric received inputs outside its domain."""


class NonFiniteLossError(IcftError, FloatingPointError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, step: int, term: str, value: float):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(
            f"non-finite {term} ({value}) at step {step}; aborting run"
        )
