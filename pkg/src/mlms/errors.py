"""Error types shared across the pipeline, carrying CLI exit codes."""


class MlmsError(Exception):
    """Base class; exit_code is used by the CLI entry point."""

    exit_code = 1


class ConfigError(MlmsError):
    """User or configuration error (bad flags, unsupported values)."""

    exit_code = 1


class DataError(MlmsError):
    """Problem with input data: unreadable files, bad formats, shape clashes."""

    exit_code = 2


class NumericalError(MlmsError):
    """Numerical failure during training (NaN/inf loss)."""

    exit_code = 3
