"""Exception hierarchy for the retrieval engine.

The CLI maps these onto exit codes: user/data errors exit 2,
backend-unavailable exits 3.
"""

from __future__ import annotations


class MatirError(Exception):
    """Base class for all engine errors."""


class MalformedMaskError(MatirError):
    """RLE mask violates its structural invariants."""


class EmptyMaskError(MatirError):
    """Operation requires a mask with at least one foreground pixel."""


class InvalidInputError(MatirError):
    """Arguments violate an operation's preconditions."""


class InvalidQueryError(MatirError):
    """Query embedding input is unusable (empty, mismatched, or degenerate)."""


class InvalidLogitError(MatirError):
    """Relevance logits are not finite numbers."""


class NoRegionError(MatirError):
    """Image has no indexed regions to select from."""


class IndexBuildError(MatirError):
    """Index construction rejected its inputs.

    ``line_no`` is the 1-based manifest line that triggered the failure,
    when the failure is attributable to one.
    """

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class IndexFormatError(MatirError):
    """Index file is unreadable: bad magic, unsupported version, truncation."""


class BackendCallError(MatirError):
    """A single backend call failed (transport, HTTP status, or bad payload)."""


class BackendUnavailableError(MatirError):
    """A required backend could not serve any call."""


class NoEvaluableQueriesError(MatirError):
    """Every query was excluded from evaluation (zero relevant images)."""
