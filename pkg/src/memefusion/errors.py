"""Exception taxonomy shared across the package.

The CLI maps these onto its stable exit codes: usage/config problems -> 2,
training aborts -> 3, artifact corruption -> 4, input decode failures -> 5.
"""


class MemeFusionError(Exception):
    """Base class for all package errors."""


class UsageError(MemeFusionError):
    """Bad arguments, bad config values, or misuse of an operation (exit 2)."""


class ConfigError(UsageError):
    """Invalid or incomplete run configuration; names the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class ArgumentError(UsageError):
    """An operation received arguments outside its documented domain."""


class ShapeError(UsageError):
    """A vector or matrix had the wrong dimensions for the operation."""


class DatasetNotFoundError(UsageError):
    """A dataset root or split file does not exist."""


class ParseError(UsageError):
    """A record file line could not be parsed; carries the line number."""

    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class LabelSchemeError(UsageError):
    """A raw label string is outside the known labeling scheme."""


class VocabularyError(UsageError):
    """A token id is outside the tokenizer vocabulary."""


class UndefinedMetricError(UsageError):
    """The metric is undefined for the given inputs (e.g. single-class AUROC)."""


class TrainingDivergedError(MemeFusionError):
    """Training aborted because the loss became non-finite (exit 3)."""


class ArtifactError(MemeFusionError):
    """A persisted artifact (weights, checkpoint) is unusable (exit 4)."""


class WeightLoadError(ArtifactError):
    """A weight archive is missing tensors or does not match its manifest."""


class CorruptionError(ArtifactError):
    """Stored bytes do not match the recorded digests."""


class CompatibilityError(ArtifactError):
    """A checkpoint does not match the configuration trying to consume it."""


class ImageDecodeError(MemeFusionError):
    """An image could not be decoded (exit 5)."""
