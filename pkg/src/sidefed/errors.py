"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numeric failures exit 3 and protocol violations exit 4.
"""


class SidefedError(Exception):
    """Base class for all package errors."""


class DimensionError(SidefedError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SidefedError, FloatingPointError):
    """A loss or gradient became non-finite."""


class StateError(SidefedError, RuntimeError):
    """An object was used in a state that does not support the call."""


class ConfigError(SidefedError, ValueError):
    """Invalid configuration. ``line`` is the 1-based source line when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)


class PlanError(SidefedError, ValueError):
    """Backbones cannot be aligned under one plan."""


class PartitionError(SidefedError, ValueError):
    """Layer or data partitioning is impossible with the given arguments."""


class IdentityError(SidefedError, KeyError):
    """A backbone id is not registered with the side network."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown backbone"


class DataError(SidefedError, ValueError):
    """Labels or samples are outside their valid range."""


class EndOfData(SidefedError):
    """A client's shard has been fully consumed."""


class ProtocolError(SidefedError, RuntimeError):
    """A message arrived that the protocol does not allow."""


class PhaseError(ProtocolError):
    """A server operation was invoked in the wrong phase."""


class FormatError(SidefedError, ValueError):
    """A binary blob does not match the expected wire format."""
