"""Exception hierarchy shared by every pipeline stage.

Each family carries the CLI exit code it maps to as ``exit_code``.
"""

from typing import Optional


class AgeAtlasError(Exception):
    """Base class for pipeline failures."""

    exit_code = 1


class ConfigError(AgeAtlasError, ValueError):
    """Run configuration failed validation."""

    exit_code = 2


class MissingArtifactError(AgeAtlasError):
    """A stage found that an upstream artifact is absent."""

    exit_code = 3

    def __init__(self, stage: str, artifact: str, hint: Optional[str] = None):
        self.stage = stage
        self.artifact = artifact
        self.hint = hint
        message = f"stage '{stage}' is missing {artifact}"
        if hint:
            message += f" (hint: {hint})"
        super().__init__(message)


class NumericalError(AgeAtlasError, ArithmeticError):
    """Non-finite loss, gradient or degenerate optimisation state."""

    exit_code = 4

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} [{details}]"
        super().__init__(message)


class RegistrationError(NumericalError):
    """Registration diverged or hit a degenerate similarity."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input carries no usable variation (constant volume, constant ages)."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the network config."""


class VolumeDecodeError(ValueError):
    """A ``.vol``/``.dfield`` file could not be decoded."""


class BadMagicError(VolumeDecodeError):
    pass


class LengthMismatchError(VolumeDecodeError):
    pass


class NonFiniteError(VolumeDecodeError):
    pass


class SubjectFailureError(AgeAtlasError):
    """A batch stage finished, but some subjects produced no output."""

    exit_code = 5

    def __init__(self, stage: str, failed: int):
        self.stage = stage
        self.failed = failed
        super().__init__(f"stage '{stage}': {failed} subject(s) failed, see the stage receipt")
