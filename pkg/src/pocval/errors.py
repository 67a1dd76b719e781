"""Exception hierarchy.

Stage errors abort a single finding; environment errors abort the run.
"""

from __future__ import annotations


class PocvalError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(PocvalError):
    pass


class FindingsParseError(PocvalError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class UnresolvableLocationError(PocvalError):
    def __init__(self, location, reason: str = "no function body contains it"):
        super().__init__(f"cannot resolve location {location!r}: {reason}")
        self.location = location


class SolidityParseError(PocvalError):
    def __init__(self, file: str, line: int, column: int, message: str):
        super().__init__(f"{file}:{line}:{column}: {message}")
        self.file = file
        self.line = line
        self.column = column


class EmptyProjectError(PocvalError):
    pass


class MetadataError(PocvalError):
    pass


class StageError(PocvalError):
    """A per-finding stage failed; carries the stage name for attribution."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class GatewayError(PocvalError):
    pass


class TransportError(GatewayError):
    """Retryable failure (network, timeout, 5xx)."""


class TranscriptExhaustedError(GatewayError):
    """The mock transcript has no entry for a requested call."""


class EnvironmentSetupError(PocvalError):
    """Toolchain or filesystem problem distinct from a test failure."""


class ToolchainMissingError(EnvironmentSetupError):
    pass


class SanitizeError(PocvalError):
    """The draft cannot be salvaged (no contract body)."""


class SnapshotMismatchError(PocvalError):
    pass


class UndefinedMetricError(PocvalError):
    pass


class ReportError(PocvalError):
    pass


class StageOrderError(PocvalError):
    pass


class BundleError(PocvalError):
    """The bug-context bundle does not match the project on disk."""
