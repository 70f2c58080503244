"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class FacilityEnumError(Exception):
    """Base class for all package errors."""


class ValidationError(FacilityEnumError, ValueError):
    """Input violates a documented precondition or type invariant."""


class SchemaError(ValidationError):
    """A JSON document does not match its expected shape."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ConfigError(FacilityEnumError):
    """Missing or inconsistent configuration (env vars, template versions)."""


class TransportError(FacilityEnumError):
    """Network failure that persisted through all retries."""

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")


class ProtocolError(FacilityEnumError):
    """A remote service answered with a payload we cannot interpret."""


class ParseError(FacilityEnumError):
    """A model reply could not be turned into a verdict or count."""

    def __init__(self, message: str, raw_text: str = ""):
        self.raw_text = raw_text
        super().__init__(message)


class FormatError(FacilityEnumError):
    """Image bytes could not be decoded."""


class GenerationError(FacilityEnumError):
    """A synthetic scenario cannot be laid out on the requested canvas."""


class StageError(FacilityEnumError):
    """Wraps a failure inside one pipeline stage for one facility type."""

    def __init__(self, stage: str, facility: str, cause: BaseException, context: str = ""):
        self.stage = stage
        self.facility = facility
        self.cause = cause
        self.context = context
        where = f" [{context}]" if context else ""
        super().__init__(f"{stage} failed for {facility}{where}: {cause}")
