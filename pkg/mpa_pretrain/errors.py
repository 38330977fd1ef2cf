"""Exception hierarchy for the MPA pre-training stack."""

EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


class MpaError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(MpaError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = EXIT_CONFIG


class FormatError(MpaError):
    """Malformed, truncated or mismatched file."""

    exit_code = EXIT_FORMAT


class IngestionError(FormatError):
    """Corpus could not be ingested (e.g. it is empty)."""


class NumericError(MpaError, ArithmeticError):
    """NaN or non-finite values where finite ones are required."""

    exit_code = EXIT_NUMERIC


class DimensionError(MpaError, ValueError):
    """Tensor shapes do not agree."""


class ContractError(MpaError, RuntimeError):
    """A documented precondition was violated by the caller."""
