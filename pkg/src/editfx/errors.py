"""Exception types shared across the toolkit."""


class EditfxError(Exception):
    """Base class for all toolkit errors."""


class IngestError(EditfxError):
    """A record or line failed validation during ingestion.

    Carries the 1-based line number when the error originates from a file.
    """

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(EditfxError):
    """Feature schemas or column layouts do not match."""


class ConfigError(EditfxError):
    """A configuration value is invalid or inconsistent."""


class PositivityError(EditfxError):
    """A treatment arm is empty where both arms are required."""


class DegenerateCellError(EditfxError):
    """A cell cannot be estimated (empty arm, zero weight sum, too few units)."""


class UnstableCellError(EditfxError):
    """Too many bootstrap resamples were discarded to trust the standard error."""
