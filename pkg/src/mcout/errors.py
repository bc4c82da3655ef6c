"""Exception types shared across the package."""


class MCOUTError(Exception):
    """Base class for all package errors."""


class ShapeError(MCOUTError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MCOUTError, ValueError):
    """A documented precondition was violated."""


class ConfigError(MCOUTError, ValueError):
    """A configuration value or file is invalid."""


class CapacityError(MCOUTError, ValueError):
    """A sequence outgrew the decoder's position table."""


class CheckpointFormatError(MCOUTError, ValueError):
    """A checkpoint file failed its magic/version/header checks."""


class NumericalAbort(MCOUTError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
