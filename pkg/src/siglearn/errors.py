"""Exception types shared across the package."""


class SigLearnError(Exception):
    """Base class for all errors raised by siglearn."""


class InvalidArgumentError(SigLearnError, ValueError):
    """An argument violates a documented precondition."""


class EmptyRecordingError(InvalidArgumentError):
    """A transform would leave no samples in the recording."""


class ConfigError(SigLearnError):
    """A configuration is internally inconsistent (e.g. shape arithmetic)."""


class StoreError(SigLearnError):
    """An on-disk artifact is malformed, truncated or unreadable."""

    def __init__(self, message, path=None, offset=None):
        if path is not None:
            message = f"{message} [file={path}" + (
                f", offset={offset}]" if offset is not None else "]"
            )
        super().__init__(message)
        self.path = path
        self.offset = offset


class DigestMismatchError(StoreError):
    """Downstream artifact was produced from a different upstream config."""


class DivergenceError(SigLearnError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
