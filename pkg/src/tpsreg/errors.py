"""Exception types shared across the package."""


class TpsRegError(Exception):
    """Base class for all package errors."""


class ContractError(TpsRegError, ValueError):
    """An input violates an operation's documented precondition."""


class DegenerateInputError(TpsRegError, ValueError):
    """The input is well-formed but carries too little information to proceed
    (empty masks, coplanar point clouds, all-zero differences, ...)."""


class FormatError(TpsRegError, ValueError):
    """A file could not be parsed."""


class UnsupportedFormatError(FormatError):
    """A file parsed, but uses a feature (element type, dimensionality) we do not read."""


class StageError(TpsRegError):
    """A pipeline stage failed. ``stage`` names it; the original error is chained."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(TpsRegError, ValueError):
    """A pipeline configuration is malformed, out of range or points at missing files."""
