"""
Error kinds raised by the sculpting engine.

Everything derives from SculptError so the CLI can separate configuration
problems (exit 2) from failures inside a stage (exit 3).
"""


class SculptError(Exception):
    """Base class for all engine errors."""


class InvalidArgumentError(SculptError, ValueError):
    pass


class DegenerateConfigurationError(SculptError, ValueError):
    """Point sets that cannot determine a transform (collinear, coincident)."""


class DegenerateInputError(SculptError, ValueError):
    """Inputs with no usable signal, e.g. zero-variance depth maps."""


class AlignmentFailureError(SculptError):
    def __init__(self, keypoint_index: int, message: str = ""):
        self.keypoint_index = keypoint_index
        super().__init__(message or f"Keypoint ray {keypoint_index} does not hit the mesh")


class MissingTargetError(SculptError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing target"


class UnsupportedCapabilityError(SculptError):
    def __init__(self, provider: str, capability: str):
        self.provider = provider
        self.capability = capability
        super().__init__(f"Provider '{provider}' does not support '{capability}'")


class ConfigError(SculptError):
    """Config parse or validation failure; carries position or field path."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 field: str | None = None):
        self.line = line
        self.column = column
        self.field = field
        where = ""
        if line is not None:
            where = f" (line {line}, column {column})"
        elif field:
            where = f" (field '{field}')"
        super().__init__(f"{message}{where}")


class StageError(SculptError):
    def __init__(self, stage: str, iteration: int | None, cause: BaseException):
        self.stage = stage
        self.iteration = iteration
        self.cause = cause
        at = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"{stage} stage failed{at}: {type(cause).__name__}: {cause}")


class AssetWriteError(SculptError):
    """An output file could not be written."""

    def __init__(self, path, cause: BaseException):
        self.path = path
        self.cause = cause
        super().__init__(f"Cannot write {path}: {cause}")
