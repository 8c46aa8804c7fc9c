"""Exception types shared across the package.

I/O failures are reported with the builtin OSError; everything the
engine itself detects derives from KgmendError so callers can catch
one base class.
"""

from __future__ import annotations


class KgmendError(Exception):
    """Base class for all engine-raised errors."""


class ParseError(KgmendError):
    """A serialized record could not be parsed.

    Carries the 1-based line (or row) number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(KgmendError):
    """A domain-type invariant was violated; the message names the invariant."""

    def __init__(self, invariant: str, detail: str = ""):
        message = invariant if not detail else f"{invariant}: {detail}"
        super().__init__(message)
        self.invariant = invariant


class DegenerateDistribution(KgmendError):
    """A probability distribution carries no usable mass."""


class MissingLayer(KgmendError):
    """A token lacks the per-layer distribution for a requested layer."""

    def __init__(self, layer: int):
        super().__init__(f"token has no distribution for candidate layer {layer}")
        self.layer = layer


class CriterionUnavailable(KgmendError):
    """A requested uncertainty criterion cannot be computed from this trace."""


class ServiceUnavailable(KgmendError):
    """An external service could not be reached or refused the request."""


class MalformedResponse(KgmendError):
    """An external service answered with a payload violating its contract."""


class CycleError(KgmendError):
    """A synonym chain loops without reaching a canonical fixed point."""


class OverlappingEdits(KgmendError):
    """Two rectification decisions target intersecting answer spans."""

    def __init__(self, left: int, right: int):
        super().__init__(
            f"decisions {left} and {right} target intersecting answer spans"
        )
        self.left = left
        self.right = right
