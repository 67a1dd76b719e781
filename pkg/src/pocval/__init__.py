"""Static finding -> Foundry PoC -> differential verdict."""

from .errors import PocvalError
from .pipeline import RunConfig, report, slice_findings, validate

__all__ = ["PocvalError", "RunConfig", "report", "slice_findings", "validate"]
__version__ = "0.1.0"
