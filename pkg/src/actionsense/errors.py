"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` (bad input, bad
configuration, contract violations; CLI exit code 1) and ``PipelineIOError``
(files, subprocesses, model runtimes, corrupt artifacts; CLI exit code 2).
"""


class ActionSenseError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ActionSenseError):
    """Input violates a documented contract."""


class PipelineIOError(ActionSenseError):
    """Reading, writing, decoding or executing something failed."""


# -- dataset -----------------------------------------------------------------


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownLabel(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


# -- shapes and dimensions ---------------------------------------------------


class ShapeError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    """Declared backbone output shape disagrees with the loaded model."""

    def __init__(self, declared, actual, name: str = ""):
        self.declared = tuple(declared) if declared is not None else None
        self.actual = tuple(actual) if actual is not None else None
        prefix = f"backbone {name!r}: " if name else ""
        super().__init__(
            f"{prefix}declared output shape {self.declared} does not match "
            f"model output shape {self.actual}"
        )


class EmptySet(ValidationError):
    pass


class InvalidFrame(ValidationError):
    pass


class EmptyFrameList(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


# -- head model and training -------------------------------------------------


class ConfigError(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class NonFiniteGradient(ValidationError):
    pass


class StaleCache(ValidationError):
    pass


class EmptyTrainingSet(ValidationError):
    pass


class SplitLeakError(ValidationError):
    """Test-split features reached the training loop."""


class UnknownSubcommand(ValidationError):
    pass


# -- I/O -----------------------------------------------------------------------


class DecoderUnavailable(PipelineIOError):
    pass


class DecodeError(PipelineIOError):
    pass


class EmptyStream(PipelineIOError):
    pass


class ModelLoadError(PipelineIOError):
    pass


class InferenceError(PipelineIOError):
    pass


class IoError(PipelineIOError):
    pass


class FormatError(PipelineIOError):
    pass


class ChecksumError(PipelineIOError):
    pass
