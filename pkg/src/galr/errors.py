"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`GALRError`
and carries a short ``kind`` tag; the CLI prints it as a greppable prefix.
"""


class GALRError(Exception):
    kind = "error"


class DimensionError(GALRError, ValueError):
    kind = "dimension"


class UsageError(GALRError, ValueError):
    kind = "usage"


class InputError(GALRError, ValueError):
    kind = "input"


class ConfigError(GALRError, ValueError):
    kind = "config"


class NonFiniteError(GALRError, FloatingPointError):
    kind = "nonfinite"


class TrainingDivergedError(GALRError, RuntimeError):
    kind = "diverged"


class WavFormatError(GALRError, ValueError):
    kind = "format"


class CheckpointError(GALRError):
    kind = "checkpoint"


class BadMagicError(CheckpointError):
    kind = "checkpoint-magic"


class UnsupportedVersionError(CheckpointError):
    kind = "checkpoint-version"


class CorruptHeaderError(CheckpointError):
    kind = "checkpoint-header"


class DirectoryMismatchError(CheckpointError):
    kind = "checkpoint-directory"


class PayloadLengthError(CheckpointError):
    kind = "checkpoint-payload"
