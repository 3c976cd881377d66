"""Exception hierarchy shared by the library and the command-line front door."""

from typing import Iterable, Optional, Sequence


class AkdError(Exception):
    """Base class for every error raised by akd-lab."""

    exit_code = 1


class ConfigError(AkdError):
    """Invalid experiment or training configuration."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArtifactError(AkdError):
    """A checkpoint, run log or data file is missing or corrupt."""

    exit_code = 3

    def __init__(self, path, message: str, missing: Optional[Sequence] = None):
        self.path = str(path)
        self.missing = list(missing or [])
        super().__init__(f"{self.path}: {message}")


class NumericError(AkdError):
    """A forward or backward pass produced NaN or Inf."""

    exit_code = 4


class DomainError(AkdError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ShapeError(AkdError, ValueError):
    """Operands have shapes the operation cannot combine."""

    def __init__(self, op: str, shapes: Iterable[tuple], message: str = "shape mismatch"):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message} for shapes {rendered}")
